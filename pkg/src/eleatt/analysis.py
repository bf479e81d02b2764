"""Closed-form parameter/FLOP accounting and attention-response analysis.

Cost-model convention: one multiply = 1 FLOP, one add or subtract = 1 FLOP,
activation functions are free.  Under that convention a GRU block of N
neurons with input dimension D costs N(6D+6N+5) FLOPs per timestep, and an
attention gate adds D(D+N+1) multiplies plus D(D+N) adds, i.e. D(2D+2N+1).
Parameter counts: N(D+N+1) per sRNN block, 4N(D+N+1) per LSTM block,
3N(D+N+1) per GRU block, D(D+N+1) per gate, K(N+1) for the classifier.

The same convention is what :class:`eleatt.numerics.FlopCounter` meters on
the live cell code paths, so `measure_step_flops` must agree with
`count_flops` exactly.

Relative attention: raw gate responses are not comparable across input
elements whose typical magnitudes differ, so each element i gets a static
modulation factor abar_i = (mean energy of the modulated element) / (mean
energy of the original element) over a dataset, and individual responses
are reported relative to it: ahat = a / abar.  For skeleton-style layouts
(D = 3J) per-joint scores sum ahat over the joint's x, y, z rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .cells import CellParams, GRU, LSTM, SRNN
from .data import SequenceBatch, check_batch
from .numerics import FlopCounter, RngStream

_PARAM_BLOCKS = {SRNN: 1, LSTM: 4, GRU: 3}


def cell_param_count(kind: str, d: int, n: int) -> int:
    """Parameter count of one ungated block."""
    return _PARAM_BLOCKS[kind] * n * (d + n + 1)


def gate_param_count(d: int, n: int) -> int:
    """Parameter surcharge of one attention gate."""
    return d * (d + n + 1)


def cell_flop_count(kind: str, d: int, n: int):
    """(multiplies, adds) per timestep for one ungated block, batch 1."""
    if kind == SRNN:
        return n * (d + n), n * (d + n)
    if kind == LSTM:
        return 4 * n * (d + n) + 3 * n, 4 * n * (d + n) + n
    if kind == GRU:
        return 3 * n * (d + n) + 3 * n, 3 * n * (d + n) + 2 * n
    raise ValueError(f"unknown kind {kind!r}")


def gate_flop_count(d: int, n: int):
    """(multiplies, adds) per timestep for one gate plus the modulation."""
    return d * (d + n + 1), d * (d + n)


@dataclass
class LayerCost:
    index: int
    kind: str
    input_dim: int
    hidden_dim: int
    gated: bool
    params_cell: int
    params_gate: int
    flops_mul: int
    flops_add: int

    @property
    def params(self) -> int:
        return self.params_cell + self.params_gate

    @property
    def flops(self) -> int:
        return self.flops_mul + self.flops_add


@dataclass
class CostReport:
    layers: list
    fc_params: int

    @property
    def total_params(self) -> int:
        return sum(lc.params for lc in self.layers) + self.fc_params

    @property
    def total_flops_per_step(self) -> int:
        return sum(lc.flops for lc in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [{"index": lc.index, "kind": lc.kind,
                        "input_dim": lc.input_dim, "hidden_dim": lc.hidden_dim,
                        "gated": lc.gated, "params_cell": lc.params_cell,
                        "params_gate": lc.params_gate, "params": lc.params,
                        "flops_mul": lc.flops_mul, "flops_add": lc.flops_add,
                        "flops": lc.flops} for lc in self.layers],
            "fc_params": self.fc_params,
            "total_params": self.total_params,
            "total_flops_per_step": self.total_flops_per_step,
        }

    def table(self, enumerated: Optional[dict] = None) -> str:
        """Aligned text table; `enumerated` maps layer index / 'fc' to the
        exact tensor-size sums for a side-by-side cross-check."""
        rows = [("layer", "kind", "D", "N", "gated", "params", "flops/step")]
        if enumerated is not None:
            rows[0] = rows[0] + ("enumerated",)
        for lc in self.layers:
            row = (str(lc.index), lc.kind, str(lc.input_dim), str(lc.hidden_dim),
                   "yes" if lc.gated else "no", f"{lc.params:,}", f"{lc.flops:,}")
            if enumerated is not None:
                row = row + (f"{enumerated[lc.index]:,}",)
            rows.append(row)
        fc_row = ("fc", "-", "-", "-", "-", f"{self.fc_params:,}", "-")
        if enumerated is not None:
            fc_row = fc_row + (f"{enumerated['fc']:,}",)
        rows.append(fc_row)
        total = ("total", "", "", "", "", f"{self.total_params:,}",
                 f"{self.total_flops_per_step:,}")
        if enumerated is not None:
            total = total + (f"{sum(enumerated.values()):,}",)
        rows.append(total)
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths))
                         for r in rows)


def count_params(config) -> CostReport:
    """Closed-form parameter counts for every layer plus the classifier."""
    layers = []
    for i, (spec, d_in) in enumerate(zip(config.layers, config.layer_input_dims())):
        mul, add_ = cell_flop_count(spec.kind, d_in, spec.hidden_dim)
        if spec.gated:
            gmul, gadd = gate_flop_count(d_in, spec.hidden_dim)
            mul, add_ = mul + gmul, add_ + gadd
        layers.append(LayerCost(
            index=i, kind=spec.kind, input_dim=d_in, hidden_dim=spec.hidden_dim,
            gated=spec.gated,
            params_cell=cell_param_count(spec.kind, d_in, spec.hidden_dim),
            params_gate=gate_param_count(d_in, spec.hidden_dim) if spec.gated else 0,
            flops_mul=mul, flops_add=add_))
    fc_params = config.num_classes * (config.layers[-1].hidden_dim + 1)
    return CostReport(layers=layers, fc_params=fc_params)


def count_flops(config) -> CostReport:
    """Closed-form per-timestep FLOP counts (same report as count_params)."""
    return count_params(config)


def enumerate_params(model) -> dict:
    """Exact tensor-size sums per layer index plus 'fc', from a built model."""
    sums: dict = {"fc": 0}
    for name, arr in model.named_parameters():
        if name.startswith("layers."):
            idx = int(name.split(".")[1])
            sums[idx] = sums.get(idx, 0) + arr.size
        else:
            sums["fc"] += arr.size
    return sums


def measure_step_flops(cell: CellParams, seed: int = 0):
    """Meter (multiplies, adds) of one live block_step at batch 1.

    Runs the actual forward code path under a FlopCounter; this is the
    independent side of the cost-model cross-check.
    """
    rng = RngStream(seed, (4242,))
    x = rng.normal((cell.input_dim, 1))
    state = cell.initial_state(1)
    state.h[...] = rng.normal((cell.hidden_dim, 1))
    if cell.kind == LSTM:
        state.c[...] = rng.normal((cell.hidden_dim, 1))
    from .cells import block_step
    with FlopCounter() as fc:
        block_step(x, state, cell)
    return fc.muls, fc.adds


# ---------------------------------------------------------------------------
# Attention traces
# ---------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Per-layer gate responses over a batch (eval mode).

    responses[layer][b] is a (D_layer, T_b) array for sequence b.
    """

    layer_indices: list
    responses: dict
    lengths: np.ndarray
    labels: np.ndarray

    def stacked(self, layer: int) -> np.ndarray:
        """(T, D, batch) array for equal-length traces."""
        seqs = self.responses[layer]
        t = seqs[0].shape[1]
        if any(s.shape[1] != t for s in seqs):
            raise ValueError("stacked() requires equal-length sequences")
        return np.stack([s.T for s in seqs], axis=2)


def extract_attention(model, batch: SequenceBatch,
                      layers: Optional[list] = None) -> AttentionTrace:
    """Record every gate response a_t for the requested layers.

    Eval mode: predictions are not perturbed and repeated extraction is
    deterministic.  Raises if the model (or a requested layer) has no gate.
    """
    check_batch(batch)
    gated = [i for i, cell in enumerate(model.layers) if cell.gated]
    if not gated:
        raise ValueError("model has no attention-gated layer to trace")
    if layers is None:
        layers = gated
    for li in layers:
        if li not in gated:
            raise ValueError(f"layer {li} has no attention gate")
    cache, _ = engine.unroll_forward(model, batch, train=False)
    lengths = batch.lengths
    responses = {}
    for li in layers:
        attn = cache.layers[li].attn
        per_seq = []
        for b in range(len(batch)):
            t_b = int(lengths[b])
            per_seq.append(np.stack([attn[t][:, b] for t in range(t_b)], axis=1))
        responses[li] = per_seq
    return AttentionTrace(layer_indices=list(layers), responses=responses,
                          lengths=lengths, labels=batch.labels.copy())


@dataclass
class RelativeAttentionReport:
    layer: int
    a_bar: np.ndarray          # (D,) static modulation factor per element
    element_scores: np.ndarray  # (D,) mean relative response per element
    relative: list             # per-sequence (D, T_b) relative responses
    joint_scores: Optional[np.ndarray]  # (J,) when D = 3J, else None
    excluded: list             # element indices with zero energy

    def to_dict(self) -> dict:
        d = {
            "layer": self.layer,
            "a_bar": [None if not np.isfinite(v) else v for v in self.a_bar],
            "element_scores": [None if not np.isfinite(v) else v
                               for v in self.element_scores],
            "excluded_elements": list(self.excluded),
        }
        if self.joint_scores is not None:
            d["joint_scores"] = list(self.joint_scores)
        return d


def relative_attention(trace: AttentionTrace, batch: SequenceBatch,
                       layer: Optional[int] = None,
                       energy: str = "abs") -> RelativeAttentionReport:
    """Relative responses ahat = a / abar over a full evaluation set.

    abar_i is the ratio of the mean energy of the modulated element i to
    the mean energy of the original element i; `energy` selects mean
    absolute value ("abs", default) or mean square ("square").  Elements
    with zero original energy have no defined abar; they are reported in
    `excluded` and carry NaN scores.

    This only makes sense for a first-layer trace, where elements of the
    gate response align with elements of the raw input.
    """
    if layer is None:
        layer = trace.layer_indices[0]
    if layer not in trace.responses:
        raise ValueError(f"trace does not cover layer {layer}")
    if energy not in ("abs", "square"):
        raise ValueError(f"energy must be 'abs' or 'square', got {energy!r}")
    responses = trace.responses[layer]
    if len(responses) != len(batch):
        raise ValueError("trace and batch have different sequence counts")

    d = responses[0].shape[0]
    e_orig = np.zeros(d)
    e_mod = np.zeros(d)
    frames = 0
    for a, seq in zip(responses, batch.sequences):
        if a.shape != seq.shape:
            raise ValueError(f"trace shape {a.shape} does not match "
                             f"sequence shape {seq.shape}")
        x = np.abs(seq) if energy == "abs" else seq ** 2
        xm = np.abs(a * seq) if energy == "abs" else (a * seq) ** 2
        e_orig += x.sum(axis=1)
        e_mod += xm.sum(axis=1)
        frames += seq.shape[1]
    e_orig /= frames
    e_mod /= frames

    excluded = [int(i) for i in np.nonzero(e_orig == 0.0)[0]]
    a_bar = np.full(d, np.nan)
    ok = e_orig > 0.0
    a_bar[ok] = e_mod[ok] / e_orig[ok]

    relative = []
    sums = np.zeros(d)
    for a in responses:
        rel = a / a_bar[:, None]
        relative.append(rel)
        sums += rel.sum(axis=1)
    element_scores = sums / frames

    joint_scores = None
    if d % 3 == 0:
        joint_scores = element_scores.reshape(d // 3, 3).sum(axis=1)
    return RelativeAttentionReport(layer=layer, a_bar=a_bar,
                                   element_scores=element_scores,
                                   relative=relative, joint_scores=joint_scores,
                                   excluded=excluded)


def write_attention_csv(path, trace: AttentionTrace,
                        report: RelativeAttentionReport) -> None:
    """Long-format per-element dump: one row per (sequence, t, element)."""
    layer = report.layer
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "label", "t", "element",
                         "response", "relative"])
        for b, (a, rel) in enumerate(zip(trace.responses[layer], report.relative)):
            for t in range(a.shape[1]):
                for i in range(a.shape[0]):
                    writer.writerow([b, int(trace.labels[b]), t, i,
                                     f"{a[i, t]:.10g}", f"{rel[i, t]:.10g}"])


def write_attention_json(path, report: RelativeAttentionReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")

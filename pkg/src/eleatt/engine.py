"""Sequence unrolling, exact backpropagation through time, and the
finite-difference oracle that cross-checks it.

Forward contract
----------------
Batches are padded to the longest sequence.  At a padded step the state is
carried forward unchanged via a blend h_t = m*h_new + (1-m)*h_prev with a
0/1 validity mask m, so padded steps contribute no gradient and the last
padded step equals the state at each sequence's true length.  Inverted
dropout (train mode only) multiplies each recurrent layer's output sequence
by one mask per (layer, sequence), constant across timesteps.

Backward contract
-----------------
`backward` returns the exact partial derivatives of the mean-batch
cross-entropy with respect to every parameter, including the attention-gate
parameters: gradient flows through both the response path and the input
path of the modulation x_eff = a * x.  No truncation; the full unrolled
graph is differentiated.

Gradient comparisons use the relative error |g1-g2| / max(1e-8, |g1|+|g2|).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cells import GATE_SIGMOID, LSTM, StepState, block_step_full
from .data import SequenceBatch, check_batch
from .numerics import RngStream


class NonFiniteLossError(FloatingPointError):
    """Loss became NaN/Inf during finite differencing."""

    def __init__(self, param_name: str, flat_index: int):
        super().__init__(f"non-finite loss while perturbing {param_name}[{flat_index}]")
        self.param_name = param_name
        self.flat_index = flat_index


@dataclass
class LayerCache:
    """Everything the backward pass needs about one layer's unroll."""

    params: object
    xs: list            # layer inputs per t, (D, B)
    attn: Optional[list]  # gate responses per t, (D, B); None when ungated
    x_eff: list         # modulated inputs per t (same arrays as xs if ungated)
    internals: list     # per-t dict of cell activations
    h_seq: list         # hidden states, h_seq[0] = initial zeros, length T+1
    c_seq: Optional[list]  # LSTM cell states, same indexing; None otherwise
    dropout_mask: Optional[np.ndarray]  # (N, B) inverted mask, None in eval
    outputs: list       # y_t fed to the next layer / readout, per t


@dataclass
class ForwardCache:
    model: object
    layers: list
    step_mask: np.ndarray  # (T, 1, B) validity
    lengths: np.ndarray
    readout: str
    fc_input: np.ndarray   # (N_top, B)
    logits: np.ndarray     # (K, B)


def unroll_forward(model, batch: SequenceBatch, train: bool = False,
                   rng: Optional[RngStream] = None):
    """Run the stacked layers over a batch; returns (cache, logits)."""
    cfg = model.config
    check_batch(batch)
    if batch.input_dim != cfg.input_dim:
        raise ValueError(f"batch input dim {batch.input_dim} does not match "
                         f"model input dim {cfg.input_dim}")
    lengths = batch.lengths
    n_batch = len(batch)
    t_max = int(lengths.max())

    x_pad = np.zeros((t_max, cfg.input_dim, n_batch))
    for b, seq in enumerate(batch.sequences):
        x_pad[:seq.shape[1], :, b] = seq.T
    step_mask = (np.arange(t_max)[:, None, None]
                 < lengths[None, None, :]).astype(np.float64)

    p_drop = cfg.dropout_p if train else 0.0
    if p_drop > 0 and rng is None:
        raise ValueError("dropout in train mode requires an RngStream")

    inputs = [x_pad[t] for t in range(t_max)]
    layer_caches = []
    for params in model.layers:
        state = params.initial_state(n_batch)
        h_seq = [state.h]
        c_seq = [state.c] if params.kind == LSTM else None
        a_seq = [] if params.gated else None
        xeff_seq = []
        internals_seq = []
        for t in range(t_max):
            new_state, internals, a, x_eff = block_step_full(inputs[t], state, params)
            m = step_mask[t]
            h = m * new_state.h + (1.0 - m) * state.h
            c = None
            if params.kind == LSTM:
                c = m * new_state.c + (1.0 - m) * state.c
                c_seq.append(c)
            state = StepState(h=h, c=c)
            h_seq.append(h)
            if a_seq is not None:
                a_seq.append(a)
            xeff_seq.append(x_eff)
            internals_seq.append(internals)
        if p_drop > 0:
            dmask = rng.bernoulli(1.0 - p_drop, (params.hidden_dim, n_batch))
            dmask /= (1.0 - p_drop)
            outputs = [h * dmask for h in h_seq[1:]]
        else:
            dmask = None
            outputs = h_seq[1:]
        layer_caches.append(LayerCache(
            params=params, xs=inputs, attn=a_seq, x_eff=xeff_seq,
            internals=internals_seq, h_seq=h_seq, c_seq=c_seq,
            dropout_mask=dmask, outputs=outputs))
        inputs = outputs

    top = layer_caches[-1].outputs
    if cfg.readout == "mean_over_time":
        total = np.zeros_like(top[0])
        for t in range(t_max):
            total += step_mask[t] * top[t]
        fc_input = total / lengths[None, :]
    else:
        # Padded steps copy state forward, so the last padded step equals
        # each sequence's true final step.
        fc_input = top[-1]
    logits = model.w_out @ fc_input + model.b_out
    cache = ForwardCache(model=model, layers=layer_caches, step_mask=step_mask,
                         lengths=lengths, readout=cfg.readout,
                         fc_input=fc_input, logits=logits)
    return cache, logits


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean-batch cross-entropy; returns (loss, dloss/dlogits)."""
    n_batch = logits.shape[1]
    shifted = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    log_probs = shifted - lse
    cols = np.arange(n_batch)
    loss = float(-log_probs[labels, cols].mean())
    dlogits = np.exp(log_probs)
    dlogits[labels, cols] -= 1.0
    dlogits /= n_batch
    return loss, dlogits


def backward(cache: ForwardCache, labels):
    """Exact gradients of mean-batch cross-entropy w.r.t. all parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    n_batch = cache.logits.shape[1]
    k = cache.logits.shape[0]
    if labels.shape != (n_batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n_batch}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels outside [0, {k})")

    loss, dlogits = softmax_cross_entropy(cache.logits, labels)
    model = cache.model
    grads = {name: np.zeros_like(arr) for name, arr in model.named_parameters()}
    grads["fc.w"] += dlogits @ cache.fc_input.T
    grads["fc.b"] += dlogits.sum(axis=1, keepdims=True)
    d_fc_input = model.w_out.T @ dlogits

    t_max = cache.step_mask.shape[0]
    if cache.readout == "mean_over_time":
        scaled = d_fc_input / cache.lengths[None, :]
        dy = [cache.step_mask[t] * scaled for t in range(t_max)]
    else:
        dy = [None] * t_max
        dy[t_max - 1] = d_fc_input

    for li in reversed(range(len(cache.layers))):
        dy = _backward_layer(cache.layers[li], dy, cache.step_mask, grads,
                             prefix=f"layers.{li}")
    return loss, grads


def _backward_layer(lc: LayerCache, dy: list, step_mask, grads, prefix: str):
    """BPTT through one layer; returns gradients w.r.t. its input sequence."""
    p = lc.params
    w = p.weights
    t_max = len(lc.outputs)
    dh_carry = np.zeros_like(lc.h_seq[0])
    dc_carry = np.zeros_like(lc.h_seq[0]) if p.kind == LSTM else None
    dxs = [None] * t_max

    for t in reversed(range(t_max)):
        dh_out = dy[t]
        if dh_out is not None and lc.dropout_mask is not None:
            dh_out = dh_out * lc.dropout_mask
        dh_total = dh_carry if dh_out is None else dh_carry + dh_out
        m = step_mask[t]
        dh_raw = dh_total * m
        dh_carry = dh_total * (1.0 - m)
        h_prev = lc.h_seq[t]
        x_eff = lc.x_eff[t]
        iv = lc.internals[t]

        if p.kind == "srnn":
            ds = dh_raw * (1.0 - iv["h_raw"] ** 2)
            grads[f"{prefix}.w_xh"] += ds @ x_eff.T
            grads[f"{prefix}.w_hh"] += ds @ h_prev.T
            grads[f"{prefix}.b_h"] += ds.sum(axis=1, keepdims=True)
            dx_eff = w["w_xh"].T @ ds
            dh_carry += w["w_hh"].T @ ds

        elif p.kind == "gru":
            r, z, cand = iv["r"], iv["z"], iv["cand"]
            dz = dh_raw * (h_prev - cand)
            dcand = dh_raw * (1.0 - z)
            dh_carry += dh_raw * z
            ds_cand = dcand * (1.0 - cand ** 2)
            grads[f"{prefix}.w_xh"] += ds_cand @ x_eff.T
            grads[f"{prefix}.w_hh"] += ds_cand @ (r * h_prev).T
            grads[f"{prefix}.b_h"] += ds_cand.sum(axis=1, keepdims=True)
            dq = w["w_hh"].T @ ds_cand
            dr = dq * h_prev
            dh_carry += dq * r
            ds_r = dr * r * (1.0 - r)
            ds_z = dz * z * (1.0 - z)
            grads[f"{prefix}.w_xr"] += ds_r @ x_eff.T
            grads[f"{prefix}.w_hr"] += ds_r @ h_prev.T
            grads[f"{prefix}.b_r"] += ds_r.sum(axis=1, keepdims=True)
            grads[f"{prefix}.w_xz"] += ds_z @ x_eff.T
            grads[f"{prefix}.w_hz"] += ds_z @ h_prev.T
            grads[f"{prefix}.b_z"] += ds_z.sum(axis=1, keepdims=True)
            dx_eff = w["w_xr"].T @ ds_r + w["w_xz"].T @ ds_z + w["w_xh"].T @ ds_cand
            dh_carry += w["w_hr"].T @ ds_r + w["w_hz"].T @ ds_z

        else:  # lstm
            c_prev = lc.c_seq[t]
            i, f, g, o, tanh_c = iv["i"], iv["f"], iv["g"], iv["o"], iv["tanh_c"]
            dc_raw = dc_carry * m
            dc_prev = dc_carry * (1.0 - m)
            do = dh_raw * tanh_c
            dc_raw = dc_raw + dh_raw * o * (1.0 - tanh_c ** 2)
            df = dc_raw * c_prev
            di = dc_raw * g
            dg = dc_raw * i
            dc_carry = dc_prev + dc_raw * f
            ds_i = di * i * (1.0 - i)
            ds_f = df * f * (1.0 - f)
            ds_o = do * o * (1.0 - o)
            ds_g = dg * (1.0 - g ** 2)
            for gate_name, ds in (("i", ds_i), ("f", ds_f), ("c", ds_g), ("o", ds_o)):
                grads[f"{prefix}.w_x{gate_name}"] += ds @ x_eff.T
                grads[f"{prefix}.w_h{gate_name}"] += ds @ h_prev.T
                grads[f"{prefix}.b_{gate_name}"] += ds.sum(axis=1, keepdims=True)
            dx_eff = (w["w_xi"].T @ ds_i + w["w_xf"].T @ ds_f
                      + w["w_xc"].T @ ds_g + w["w_xo"].T @ ds_o)
            dh_carry += (w["w_hi"].T @ ds_i + w["w_hf"].T @ ds_f
                         + w["w_hc"].T @ ds_g + w["w_ho"].T @ ds_o)

        if p.gate is not None:
            a = lc.attn[t]
            x = lc.xs[t]
            da = dx_eff * x
            dx = dx_eff * a
            if p.gate.activation == GATE_SIGMOID:
                du = da * a * (1.0 - a)
            else:
                du = a * (da - (da * a).sum(axis=0, keepdims=True))
            grads[f"{prefix}.gate.w_xa"] += du @ x.T
            grads[f"{prefix}.gate.w_ha"] += du @ h_prev.T
            grads[f"{prefix}.gate.b_a"] += du.sum(axis=1, keepdims=True)
            dx += p.gate.w_xa.T @ du
            dh_carry += p.gate.w_ha.T @ du
            dxs[t] = dx
        else:
            dxs[t] = dx_eff
    return dxs


def finite_diff_grad(lossfn, params: dict, eps: float = 1e-5) -> dict:
    """Central finite differences (L(p+eps) - L(p-eps)) / (2 eps) per scalar.

    `params` arrays are perturbed in place and restored; `lossfn` takes no
    arguments and must see the perturbations (i.e. close over the same
    arrays).  Aborts with the offending parameter on non-finite loss.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for idx in range(arr.size):
            orig = arr.flat[idx]
            arr.flat[idx] = orig + eps
            lp = lossfn()
            arr.flat[idx] = orig - eps
            lm = lossfn()
            arr.flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteLossError(name, idx)
            g.flat[idx] = (lp - lm) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Elementwise |g1 - g2| / max(1e-8, |g1| + |g2|)."""
    return np.abs(g1 - g2) / np.maximum(1e-8, np.abs(g1) + np.abs(g2))

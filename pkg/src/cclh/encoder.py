"""Temporal GRU encoders and cross-modal attention fusion.

The recurrence is written out explicitly rather than using ``torch.nn.GRU``:
every gate is a single affine map of the concatenation ``[h_{t-1}, x_t]``,

    z_t = sigmoid(W_z [h_{t-1}, x_t])
    r_t = sigmoid(W_r [h_{t-1}, x_t])
    c_t = tanh(W [r_t * h_{t-1}, x_t])
    h_t = (1 - z_t) * c_t + z_t * h_{t-1}

Fusion scores each modality's final state with one shared ``d -> 1`` map,
squashes it with a sigmoid, softmaxes across modalities and sums.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeMismatch


def _init_uniform(linear: nn.Linear, hidden: int):
    bound = 1.0 / math.sqrt(hidden)
    nn.init.uniform_(linear.weight, -bound, bound)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)


class GRULayer(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        cat = hidden_size + input_size
        self.update = nn.Linear(cat, hidden_size)
        self.reset = nn.Linear(cat, hidden_size)
        self.candidate = nn.Linear(cat, hidden_size)
        for lin in (self.update, self.reset, self.candidate):
            _init_uniform(lin, hidden_size)

    def step(self, h, x):
        """One recurrence step; returns ``(h_t, z_t, r_t)``."""
        hx = torch.cat([h, x], dim=-1)
        z = torch.sigmoid(self.update(hx))
        r = torch.sigmoid(self.reset(hx))
        c = torch.tanh(self.candidate(torch.cat([r * h, x], dim=-1)))
        return (1 - z) * c + z * h, z, r

    def forward(self, xs):
        """``xs``: (batch, T, input) -> hidden sequence (batch, T, hidden).

        Same recurrence as :meth:`step`, with the input halves of all three maps
        applied to every timestep in one product.
        """
        d = self.hidden_size
        w_zr = torch.cat([self.update.weight, self.reset.weight])
        w_c = self.candidate.weight
        proj = F.linear(xs, torch.cat([w_zr[:, d:], w_c[:, d:]]),
                        torch.cat([self.update.bias, self.reset.bias, self.candidate.bias]))
        w_zr_h, w_c_h = w_zr[:, :d], w_c[:, :d]
        h = xs.new_zeros(xs.shape[0], d)
        out = []
        for t in range(xs.shape[1]):
            p = proj[:, t]
            zr = torch.sigmoid(p[:, : 2 * d] + h @ w_zr_h.T)
            z, r = zr[:, :d], zr[:, d:]
            c = torch.tanh(p[:, 2 * d:] + (r * h) @ w_c_h.T)
            h = (1 - z) * c + z * h
            out.append(h)
        return torch.stack(out, dim=1)


class GRUEncoder(nn.Module):
    """Stacked GRU over one modality; returns the top layer's final state."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 3):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.layers = nn.ModuleList(
            GRULayer(input_size if i == 0 else hidden_size, hidden_size) for i in range(num_layers))

    def forward(self, x):
        # x: (instances, channels, snapshots)
        if x.ndim != 3 or x.shape[1] != self.input_size:
            raise ShapeMismatch(f"expected (V, {self.input_size}, T), got {tuple(x.shape)}")
        if x.shape[2] < 1:
            raise ShapeMismatch("need at least one snapshot")
        seq = x.transpose(1, 2)
        for layer in self.layers:
            seq = layer(seq)
        return seq[:, -1]


def gru_encode(x, encoder: GRUEncoder):
    return encoder(x)


class ModalityFusion(nn.Module):
    def __init__(self, hidden_size: int):
        super().__init__()
        self.score = nn.Linear(hidden_size, 1)
        _init_uniform(self.score, hidden_size)

    def forward(self, *states):
        """Fuse per-modality states of shape (V, d); returns ``(H, weights)``.

        ``weights`` has shape (V, n_modalities) and sums to one per row.
        """
        shapes = {tuple(s.shape) for s in states}
        if len(shapes) != 1:
            raise ShapeMismatch(f"modality states disagree in shape: {sorted(shapes)}")
        stacked = torch.stack(states, dim=1)
        alpha = torch.sigmoid(self.score(stacked)).squeeze(-1)
        weights = torch.softmax(alpha, dim=1)
        return (weights.unsqueeze(-1) * stacked).sum(dim=1), weights


def fuse_modalities(h_metrics, h_traces, h_logs, fusion: ModalityFusion):
    return fusion(h_metrics, h_traces, h_logs)

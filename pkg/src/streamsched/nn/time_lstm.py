"""Time-aware LSTM whose memory update is gated by the gap between events.

One step, with ``act`` the sigmoid (or tanh when configured)::

    g_t = sigmoid(x_t W_xg + sigmoid(dt W_g + b_g))
    f_t = sigmoid(x_t W_xf + s_{t-1} W_sf + b_f)
    i_t = sigmoid(x_t W_xi + s_{t-1} W_si + b_i)
    q_t = f_t * q_{t-1} + i_t * g_t * act(x_t W_xq + s_{t-1} W_sq + b_q)
    o_t = sigmoid(x_t W_xo + dt W_o + s_{t-1} W_so + q_t * W_qo + b_o)
    s_t = o_t * act(q_t)
"""
from __future__ import annotations

import torch
from torch import nn

from ..events import DomainError
from ._init import DTYPE, make_generator, uniform_param


class TimeLSTM(nn.Module):
    def __init__(self, input_dim: int, state_dim: int, seed: int = 0, activation: str = "sigmoid"):
        super().__init__()
        if activation not in ("sigmoid", "tanh"):
            raise DomainError(f"lstm activation must be sigmoid or tanh, got {activation!r}")
        self.input_dim = d_x = int(input_dim)
        self.state_dim = d_s = int(state_dim)
        self.activation = activation
        gen = make_generator(seed)
        p = lambda *shape, fan_in: uniform_param(shape, fan_in, gen)  # noqa: E731
        self.W_xg, self.W_g, self.b_g = p(d_x, d_s, fan_in=d_x), p(1, d_s, fan_in=1), p(d_s, fan_in=1)
        self.W_xf, self.W_sf, self.b_f = p(d_x, d_s, fan_in=d_x), p(d_s, d_s, fan_in=d_s), p(d_s, fan_in=d_s)
        self.W_xi, self.W_si, self.b_i = p(d_x, d_s, fan_in=d_x), p(d_s, d_s, fan_in=d_s), p(d_s, fan_in=d_s)
        self.W_xq, self.W_sq, self.b_q = p(d_x, d_s, fan_in=d_x), p(d_s, d_s, fan_in=d_s), p(d_s, fan_in=d_s)
        self.W_xo, self.W_o, self.W_so = p(d_x, d_s, fan_in=d_x), p(1, d_s, fan_in=1), p(d_s, d_s, fan_in=d_s)
        self.W_qo, self.b_o = p(d_s, fan_in=1), p(d_s, fan_in=d_s)

    def _act(self, x):
        return torch.sigmoid(x) if self.activation == "sigmoid" else torch.tanh(x)

    def forward(self, features: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        """Encode ``(l, d_x)`` or batched ``(B, l, d_x)`` windows to final states."""
        unbatched = features.dim() == 2
        if unbatched:
            features, deltas = features.unsqueeze(0), deltas.unsqueeze(0)
        if features.dim() != 3 or features.shape[-1] != self.input_dim:
            raise DomainError(f"expected features (.., l, {self.input_dim}), got {tuple(features.shape)}")
        if deltas.shape != features.shape[:2]:
            raise DomainError(f"deltas shape {tuple(deltas.shape)} does not match features")
        if features.shape[1] < 1:
            raise DomainError("window must hold at least one event")
        if torch.any(deltas < 0):
            raise DomainError("time gaps must be non-negative")

        batch = features.shape[0]
        s = features.new_zeros(batch, self.state_dim)
        q = features.new_zeros(batch, self.state_dim)
        for t in range(features.shape[1]):
            x = features[:, t]
            dt = deltas[:, t:t + 1]
            g = torch.sigmoid(x @ self.W_xg + torch.sigmoid(dt @ self.W_g + self.b_g))
            f = torch.sigmoid(x @ self.W_xf + s @ self.W_sf + self.b_f)
            i = torch.sigmoid(x @ self.W_xi + s @ self.W_si + self.b_i)
            q = f * q + i * g * self._act(x @ self.W_xq + s @ self.W_sq + self.b_q)
            o = torch.sigmoid(x @ self.W_xo + dt @ self.W_o + s @ self.W_so + q * self.W_qo + self.b_o)
            s = o * self._act(q)
        return s[0] if unbatched else s


def time_lstm_encode(features, deltas, params: TimeLSTM) -> torch.Tensor:
    return params(torch.as_tensor(features, dtype=DTYPE), torch.as_tensor(deltas, dtype=DTYPE))

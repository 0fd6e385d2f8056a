"""Trainable building blocks (float64 torch modules) and a gradient checker."""
from .dense import MLP, mlp_forward
from .gradcheck import GradCheckReport, grad_check
from .gtrxl import GTrXL, gtrxl_encode
from .time_lstm import TimeLSTM, time_lstm_encode

__all__ = [
    "MLP", "mlp_forward", "TimeLSTM", "time_lstm_encode", "GTrXL", "gtrxl_encode",
    "grad_check", "GradCheckReport",
]

"""BT.709 full-range RGB <-> YUV conversion, applied identically in
training and evaluation. Inputs and outputs are on the [0, 1] scale;
U and V are offset by +0.5 so the representable range stays [0, 1]."""
from __future__ import annotations

import numpy as np

KR, KG, KB = 0.2126, 0.7152, 0.0722
_U_DEN = 1.8556  # 2 * (1 - KB)
_V_DEN = 1.5748  # 2 * (1 - KR)


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    y = KR * rgb[..., 0] + KG * rgb[..., 1] + KB * rgb[..., 2]
    u = (rgb[..., 2] - y) / _U_DEN + 0.5
    v = (rgb[..., 0] - y) / _V_DEN + 0.5
    return np.stack([y, u, v], axis=-1)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    yuv = np.asarray(yuv, dtype=np.float64)
    y = yuv[..., 0]
    b = (yuv[..., 1] - 0.5) * _U_DEN + y
    r = (yuv[..., 2] - 0.5) * _V_DEN + y
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)

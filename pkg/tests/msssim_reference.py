"""Independent MS-SSIM reference used as the cross-check oracle.

Numpy + scipy.ndimage implementation sharing only the documented
convention (11x11 Gaussian window sigma 1.5, mirror padding, 2x2 mean
pooling, per-channel averaging) with the production torch code, never its
code path.
"""

import numpy as np

from condvc import eval_harness as ev


def reference_msssim(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.ndimage import correlate

    coords = np.arange(11) - 5.0
    g = np.exp(-(coords**2) / (2 * 1.5**2))
    g /= g.sum()
    window = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        return correlate(x, window, mode="mirror")

    def pool(x):
        h, w = x.shape
        return x[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    scales = ev.msssim_scale_count(a.shape[1], a.shape[2])
    weights = np.array(ev.MSSSIM_WEIGHTS[:scales])
    weights /= weights.sum()

    score = 1.0
    for k in range(scales):
        cs_vals, lum_vals = [], []
        for ch in range(3):
            x, y = a[ch], b[ch]
            mx, my = filt(x), filt(y)
            sx = filt(x * x) - mx * mx
            sy = filt(y * y) - my * my
            sxy = filt(x * y) - mx * my
            cs = (2 * sxy + c2) / (sx + sy + c2)
            cs_vals.append(cs.mean())
            lum_vals.append(((2 * mx * my + c1) / (mx * mx + my * my + c1) * cs).mean())
        if k == scales - 1:
            score *= max(np.mean(lum_vals), 0.0) ** weights[k]
        else:
            score *= max(np.mean(cs_vals), 0.0) ** weights[k]
            a = np.stack([pool(a[ch]) for ch in range(3)])
            b = np.stack([pool(b[ch]) for ch in range(3)])
    return float(score)

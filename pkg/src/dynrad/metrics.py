"""Image-quality metrics and the shadow-weight histogram export.

PSNR uses peak 1 and caps identical images at 99 dB. SSIM follows the
original publication's defaults: 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, computed per channel on valid (fully inside)
windows and averaged.
"""

from __future__ import annotations

import csv

import numpy as np

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """-10 log10(MSE), peak 1; identical images report the 99 dB cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(-10.0 * np.log10(mse), PSNR_CAP_DB)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable valid-mode correlation with a 1D kernel along both axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    w = len(k)
    win = sliding_window_view(img, w, axis=0)
    img = np.tensordot(win, k, axes=([-1], [0]))
    win = sliding_window_view(img, w, axis=1)
    return np.tensordot(win, k, axes=([-1], [0]))


def ssim(a, b):
    """Mean local SSIM in [-1, 1]; channels averaged."""
    a, b = _check_pair(a, b)
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _gaussian_kernel()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _filter_valid(x, k)
        my = _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def shadow_histogram(shadow_map, bins=10):
    """Left-closed bins over [0, 1]; the last bin includes 1.0.

    Returns dict with edges, counts, percentages."""
    m = np.asarray(shadow_map, dtype=np.float64).ravel()
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("shadow weights must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((m * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return {"edges": edges, "counts": counts,
            "percentages": 100.0 * counts / max(m.size, 1)}


def save_histogram_csv(hist, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "percent"])
        for i, c in enumerate(hist["counts"]):
            w.writerow([hist["edges"][i], hist["edges"][i + 1], int(c),
                        f"{hist['percentages'][i]:.6f}"])


def save_histogram_plot(hist, path, title="shadow weight distribution"):
    """Log-scale bar plot annotated with counts and percentages."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    edges, counts = hist["edges"], hist["counts"]
    centers = (edges[:-1] + edges[1:]) / 2.0
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, np.maximum(counts, 1e-1), width=0.9 * (edges[1] - edges[0]),
           color="#4878cf", edgecolor="black", linewidth=0.4)
    ax.set_yscale("log")
    ax.set_xlabel("shadow weight")
    ax.set_ylabel("pixel count (log)")
    ax.set_title(title)
    for c, cnt, pct in zip(centers, counts, hist["percentages"]):
        if cnt > 0:
            ax.annotate(f"{int(cnt)}\n{pct:.1f}%", (c, cnt), ha="center",
                        va="bottom", fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_metrics_report(pairs):
    """[(frame, rendered, reference)] -> list of rows + means."""
    rows = []
    for frame, a, b in pairs:
        rows.append({"frame": frame, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else 0.0
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else 0.0
    return rows, mean_psnr, mean_ssim


def save_metrics_csv(rows, mean_psnr, mean_ssim, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["frame"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
        w.writerow(["mean", f"{mean_psnr:.6f}", f"{mean_ssim:.6f}"])

"""Figure rendering for the report paths.

Every delimited report has a matching figure: the training spectrum CSV gets
a singular-value/retained-energy panel, the scaling report CSVs get a
speedup-or-efficiency curve plus a phase breakdown.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402


def save_spectrum_figure(factors, path) -> Path:
    """Singular-value decay and cumulative retained energy, r marked."""
    path = Path(path)
    sigma = factors.singular_values
    energy = factors.energy
    r = factors.r

    fig, (ax_sv, ax_en) = plt.subplots(1, 2, figsize=(9, 3.4))
    positive = sigma[sigma > 0]
    ax_sv.semilogy(np.arange(1, len(positive) + 1), positive, "b-", lw=1.4)
    ax_sv.axvline(r, color="r", ls="--", lw=1.0, label=f"r = {r}")
    ax_sv.set_xlabel("mode index")
    ax_sv.set_ylabel("singular value")
    ax_sv.legend()
    ax_sv.grid(True, alpha=0.3)

    ax_en.plot(np.arange(1, len(energy) + 1), 100.0 * energy, "b-", lw=1.4)
    ax_en.axvline(r, color="r", ls="--", lw=1.0)
    ax_en.axhline(100.0 * energy[r - 1], color="r", ls=":", lw=1.0,
                  label=f"{100.0 * energy[r - 1]:.2f}% at r = {r}")
    ax_en.set_xlabel("number of modes")
    ax_en.set_ylabel("retained energy (%)")
    ax_en.set_ylim(0, 105)
    ax_en.legend()
    ax_en.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_scaling_figure(rows, path) -> Path:
    """Measured vs ideal scaling on the left, phase breakdown on the right."""
    path = Path(path)
    mode = rows[0].mode
    p = [row.timings.p for row in rows]
    measured = [row.speedup_or_efficiency for row in rows]
    ideal = [row.ideal for row in rows]

    fig, (ax_s, ax_b) = plt.subplots(1, 2, figsize=(9.5, 3.6))
    ax_s.plot(p, measured, "bo-", lw=1.4, label="measured")
    ax_s.plot(p, ideal, "k--", lw=1.0, label="ideal")
    ax_s.set_xscale("log", base=2)
    ax_s.set_xlabel("ranks")
    ax_s.set_ylabel("speedup" if mode == "strong" else "efficiency")
    ax_s.set_title(f"{mode} scaling")
    ax_s.legend()
    ax_s.grid(True, alpha=0.3)

    phases = ("io", "compute", "learn", "comm")
    colors = ("#4878cf", "#6acc65", "#d65f5f", "#b47cc7")
    bottoms = np.zeros(len(rows))
    x = np.arange(len(rows))
    for phase, color in zip(phases, colors):
        vals = np.array([getattr(row.timings, phase) for row in rows])
        ax_b.bar(x, vals, bottom=bottoms, color=color, label=phase, width=0.6)
        bottoms += vals
    ax_b.set_xticks(x, [str(v) for v in p])
    ax_b.set_xlabel("ranks")
    ax_b.set_ylabel("seconds")
    ax_b.set_title("phase breakdown")
    ax_b.legend()
    ax_b.grid(True, axis="y", alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path

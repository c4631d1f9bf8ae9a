"""Static histogram figures for simulation studies."""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"mde": "tab:blue", "poisson": "tab:orange"}
LABELS = {"mde": "minimum distance", "poisson": "Poisson"}


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def parameter_histograms(result, out_dir, bins: int = 30) -> list:
    """One SVG per parameter, estimators overlaid, true value marked.

    Returns the list of written paths.
    """
    out_dir = Path(out_dir)
    config = result.config
    written = []
    with plt.rc_context({"svg.hashsalt": "sepmatch", "svg.fonttype": "none"}):
        for name, truth in zip(config.param_names, config.truth):
            series = {}
            for est in config.estimators:
                vals = np.array(
                    [r[name] for r in result.rows if r["estimator"] == est and r["status"] == "ok" and name in r],
                    dtype=float,
                )
                vals = vals[np.isfinite(vals)]
                if vals.size:
                    series[est] = vals
            if not series:
                continue
            allv = np.concatenate(list(series.values()) + [[truth]])
            lo, hi = allv.min(), allv.max()
            if hi - lo < 1e-12 * max(1.0, abs(hi)):
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, bins + 1)
            fig, ax = plt.subplots(figsize=(5.0, 3.5))
            for est, vals in series.items():
                ax.hist(vals, bins=edges, alpha=0.55, color=COLORS[est], label=LABELS[est])
            ax.axvline(truth, color="k", lw=1.2, ls="--", label="true value")
            ax.set_xlabel(name)
            ax.set_ylabel("replications")
            ax.set_title(f"{name}: N={config.N}, {config.S_reps} replications", fontsize=9)
            ax.legend(fontsize=8, frameon=False)
            fig.tight_layout()
            path = out_dir / f"hist_{_safe(name)}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written

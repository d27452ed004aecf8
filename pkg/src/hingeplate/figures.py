"""Optional PNG figures for CLI runs (needs the ``plots`` extra).

The CSV and JSON files stay the primary output; every figure is drawn from
numbers that are also written to a CSV.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral import Geometry, to_physical  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, out: Path, name: str) -> str:
    fig.tight_layout()
    fig.savefig(out / name)
    plt.close(fig)
    return name


def energy_figure(out: Path, times, energy, dissipation) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pos = energy > 0
        ax.semilogy(times[pos], energy[pos], label="energy")
        if np.any(dissipation > 0):
            ax.semilogy(times[1:], np.maximum(dissipation[1:], 1e-300), "--", label="cumulative dissipation")
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, out, "energy.png")


def gramian_figure(out: Path, T, mu) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(T, mu, "o-")
        ax.set_xlabel("T")
        ax.set_ylabel("smallest Gramian eigenvalue")
        return _save(fig, out, "gramian.png")


def control_figure(out: Path, geom: Geometry, solution) -> str:
    t, vals = solution.times_and_values()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if geom.dim == 1 and t.size:
            x = geom.points()[0]
            lim = float(np.max(np.abs(vals))) or 1.0
            mesh = ax.pcolormesh(x, t, vals, cmap="RdBu_r", vmin=-lim, vmax=lim, shading="nearest")
            fig.colorbar(mesh, ax=ax, label="g(t, x)")
            ax.set_xlabel("x")
            ax.set_ylabel("t")
        else:
            flat = vals.reshape(vals.shape[0], -1) if t.size else np.zeros((0, 1))
            ax.plot(t, np.sqrt(geom.cell_volume() * np.sum(flat**2, axis=1)))
            ax.set_xlabel("t")
            ax.set_ylabel("L2 norm of g(t)")
        return _save(fig, out, "control.png")


def equilibria_figure(out: Path, geom: Geometry, equilibria) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if geom.dim == 1:
            shape = (4 * geom.grid_shape[0],)
            x = geom.points(shape)[0]
            for eq in equilibria:
                ax.plot(x, to_physical(geom, eq.e_hat, shape=shape), label=f"e{eq.index}")
            ax.set_xlabel("x")
            ax.legend()
        else:
            ax.bar([eq.index for eq in equilibria], [np.linalg.norm(eq.e_hat) for eq in equilibria])
            ax.set_xlabel("equilibrium")
            ax.set_ylabel("L2 norm")
        return _save(fig, out, "equilibria.png")


def render(kind: str, out: Path, geom: Geometry, **data) -> list[str]:
    out = Path(out)
    if kind == "simulate":
        return [energy_figure(out, data["times"], data["energy"], data["dissipation"])]
    if kind == "observability":
        return [gramian_figure(out, data["T"], data["mu"])]
    if kind == "control":
        return [control_figure(out, geom, data["solution"])]
    if kind == "equilibria":
        return [equilibria_figure(out, geom, data["equilibria"])]
    raise ValueError(f"no figure for {kind!r}")

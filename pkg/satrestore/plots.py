from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    import pandas as pd
    from matplotlib.axes import Axes


__all__ = ("plot_coverage_curve",)


def plot_coverage_curve(
    ax: Axes,
    curve: pd.DataFrame,
    label: str | None = None,
    *,
    show_identity: bool = True,
    show_stderr: bool = True,
) -> Axes:
    """Plot interval coverage probabilities against their nominal level.

    A well-calibrated predictor lies on the identity line.

    Parameters
    ----------
    ax : Axes
        The axes to plot on.
    curve : pd.DataFrame
        Coverage curve with the columns ``alpha``, ``icp`` and ``stderr``, as returned by
        `satrestore.uncertainty.coverage_curve`.
    label : str, optional
        Legend label of the curve.
    show_identity : bool
        If true, draws the identity as a dashed reference line. Defaults to `True`.
    show_stderr : bool
        If true, shades two standard errors around the curve. Defaults to `True`.

    Returns
    -------
    Axes
        The axes with the curve.
    """
    if show_identity:
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1)

    (line,) = ax.plot(curve["alpha"], curve["icp"], marker="o", label=label)

    if show_stderr:
        margin = 2 * np.asarray(curve["stderr"])
        ax.fill_between(
            curve["alpha"],
            np.clip(curve["icp"] - margin, 0, 1),
            np.clip(curve["icp"] + margin, 0, 1),
            color=line.get_color(),
            alpha=0.2,
        )

    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xlabel("Nominal level")
    ax.set_ylabel("Interval coverage probability")

    if label is not None:
        ax.legend()

    return ax

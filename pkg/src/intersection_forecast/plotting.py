"""Figures: per-step error curves and prediction overlays."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.patches as patches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import Sample  # noqa: E402
from .raster import TICK_SECONDS, ego_frame_points  # noqa: E402
from .simgen import Scenario  # noqa: E402
from .train_eval import EvalReport, constant_velocity_prediction  # noqa: E402

logger = logging.getLogger(__name__)

SAME_DIRECTION_COS = 0.5


def plot_step_errors(reports: Mapping[str, EvalReport], path: str) -> Optional[Path]:
    """
    Draw per-step displacement error curves of several models on one axes.

    Args:
        reports: EvalReport per model label
        path: Output PNG

    Returns:
        Path written, or None when there is nothing to draw
    """
    if not reports:
        logger.warning("No evaluation reports to plot")
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, report in reports.items():
        seconds = TICK_SECONDS * np.arange(1, len(report.per_step_errors) + 1)
        ax.plot(seconds, report.per_step_errors, marker="o", markersize=3, label=label)
    ax.set_xlabel("prediction horizon (s)")
    ax.set_ylabel("displacement error (m)")
    ax.grid(alpha=0.3)
    ax.legend()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote step-error plot for {len(reports)} models to {out}")
    return out


def build_prediction_dump(
    scenario: Scenario, sample: Sample, prediction: np.ndarray, model_kind: str
) -> Dict[str, Any]:
    """
    Collect everything an overlay needs, in the ego frame of the last observed pose.

    Lanes are flagged as same-direction when their heading near the target is
    within 60 degrees of the target heading.
    """
    origin, heading = sample.origin, sample.origin_heading
    target_dir = np.array([math.cos(heading), math.sin(heading)])
    lanes = []
    for sid in sorted(scenario.graph.segments):
        seg = scenario.graph[sid]
        ring = np.asarray(seg.polygon.exterior.coords)
        direction = seg.direction_at(origin)
        lanes.append(
            {
                "id": sid,
                "polygon": ego_frame_points(ring, origin, heading).tolist(),
                "same_direction": bool(np.dot(direction, target_dir) > SAME_DIRECTION_COS),
            }
        )

    target = scenario.track(sample.target_agent_id)
    tick = target.start_tick + sample.t_index
    vehicles = []
    for track in scenario.tracks:
        if track.agent_id == sample.target_agent_id:
            continue
        state = track.state_at_tick(tick)
        if state is not None:
            corners = ego_frame_points(state.box_corners(), origin, heading)
            vehicles.append({"agent_id": track.agent_id, "corners": corners.tolist()})

    return {
        "key": sample.key,
        "model_kind": model_kind,
        "behavior_label": sample.behavior_label,
        "history": sample.history_positions.tolist(),
        "ground_truth": sample.future_positions.tolist(),
        "prediction": np.asarray(prediction).tolist(),
        "constant_velocity": constant_velocity_prediction(
            sample.history_positions, sample.n
        ).tolist(),
        "lanes": lanes,
        "vehicles": vehicles,
    }


def save_prediction_dump(dump: Dict[str, Any], path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(dump))
    return out


def load_prediction_dump(path: str) -> Dict[str, Any]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Prediction dump not found: {path}")
    return json.loads(source.read_text())


def plot_prediction(dump: Mapping[str, Any], path: str, view: float = 60.0) -> Path:
    """
    Overlay one prediction on its scene.

    Same-direction lanes are white and the rest gray on a dark background;
    surrounding vehicles are boxes; history fades from old to new; the
    prediction, ground truth and dashed constant-velocity reference are drawn
    on top.

    Args:
        dump: Output of build_prediction_dump
        path: Output PNG
        view: Half-width of the view window in meters

    Returns:
        Path written
    """
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.set_facecolor("black")
    for lane in dump["lanes"]:
        color = "white" if lane["same_direction"] else "gray"
        ax.add_patch(patches.Polygon(lane["polygon"], closed=True, color=color, alpha=0.35, lw=0))
    for vehicle in dump["vehicles"]:
        ax.add_patch(
            patches.Polygon(vehicle["corners"], closed=True, fill=False, edgecolor="orange", lw=1.2)
        )

    history = np.asarray(dump["history"])
    alphas = np.linspace(0.2, 1.0, len(history))
    ax.scatter(history[:, 0], history[:, 1], c="deepskyblue", alpha=alphas, s=12, label="history")
    truth = np.asarray(dump["ground_truth"])
    pred = np.asarray(dump["prediction"])
    linear = np.asarray(dump["constant_velocity"])
    ax.plot(truth[:, 0], truth[:, 1], color="lime", lw=2, label="ground truth")
    ax.plot(pred[:, 0], pred[:, 1], color="red", lw=2, label=f"prediction ({dump['model_kind']})")
    ax.plot(linear[:, 0], linear[:, 1], color="yellow", lw=1.5, ls="--", label="constant velocity")

    ax.set_xlim(-view, view)
    ax.set_ylim(-view / 2, 1.5 * view)
    ax.set_aspect("equal")
    ax.set_title(f"{dump['key']} [{dump['behavior_label']}]", fontsize=9)
    ax.legend(loc="upper right", fontsize=7)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote prediction overlay to {out}")
    return out

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from fedul_sim._errors import DimensionError, EvaluationError
from fedul_sim.data import FederatedDataset
from fedul_sim.model import MlpModel, predict_accuracy
from fedul_sim.params import ParamVector
from fedul_sim.unlearning import UnlearnConfig, fast_fedul
from fedul_sim.update_store import UpdateStore

BIN_WIDTH_DEG = 5.0


@dataclass
class DeviationReport:
    """Angles between two models' final-layer weight rows."""

    mean_deg: float
    histogram: List[int]
    """Counts per 5° bin over [0°, 180°]; 180° falls in the last bin."""
    row_angles: List[float] = field(default_factory=list)
    whole_layer_deg: float = 0.0
    """Angle between the two flattened final-layer weight matrices."""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_deg": self.mean_deg,
            "whole_layer_deg": self.whole_layer_deg,
            "row_angles": list(self.row_angles),
            "histogram": list(self.histogram),
            "bin_width_deg": BIN_WIDTH_DEG,
        }


@dataclass
class EvalReport:
    main_acc: float
    backdoor_acc: Optional[float]
    """None when the federation has no backdoor test set."""
    wall_times: Dict[str, float] = field(default_factory=dict)
    stored_bytes: int = 0
    deviation: Optional[DeviationReport] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "main_acc": self.main_acc,
            "backdoor_acc": self.backdoor_acc,
            "wall_times": dict(self.wall_times),
            "stored_bytes": self.stored_bytes,
            "deviation": self.deviation.to_dict() if self.deviation else None,
        }


def evaluate(model: MlpModel, fed: FederatedDataset) -> tuple[float, Optional[float]]:
    """(main-task accuracy, share of triggered samples sent to the target label)."""
    main_acc = predict_accuracy(model, fed.test_main)
    if fed.test_backdoor is None:
        return main_acc, None
    # Backdoor test labels are all the target label, so accuracy is the attack success rate.
    return main_acc, predict_accuracy(model, fed.test_backdoor)


def deviation_angle(w_u: ParamVector | np.ndarray, w_r: ParamVector | np.ndarray) -> float:
    """Angle in degrees between two vectors, cosine clamped to [-1, 1]."""
    a = w_u.values if isinstance(w_u, ParamVector) else np.asarray(w_u, dtype=np.float64)
    b = w_r.values if isinstance(w_r, ParamVector) else np.asarray(w_r, dtype=np.float64)
    a, b = a.reshape(-1), b.reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"Dimension mismatch: {a.shape[0]} != {b.shape[0]}.")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvaluationError("Deviation angle is undefined for a zero vector.")
    cos = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def _histogram(angles: List[float]) -> List[int]:
    bins = int(round(180.0 / BIN_WIDTH_DEG))
    counts = [0] * bins
    for a in angles:
        counts[min(bins - 1, int(a // BIN_WIDTH_DEG))] += 1
    return counts


def deviation_histogram(model_a: MlpModel, model_b: MlpModel) -> DeviationReport:
    """Per-class-row angles between the final-layer weights of two models (bias excluded)."""
    if model_a.spec != model_b.spec:
        raise DimensionError(
            f"Cannot compare models of different specs: {model_a.spec} vs {model_b.spec}."
        )
    w_a, _ = model_a.layers[-1]
    w_b, _ = model_b.layers[-1]
    angles = [deviation_angle(ra, rb) for ra, rb in zip(w_a, w_b)]
    return DeviationReport(
        mean_deg=float(np.mean(angles)),
        histogram=_histogram(angles),
        row_angles=angles,
        whole_layer_deg=deviation_angle(w_a, w_b),
    )


def write_histogram_csv(report: DeviationReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_start_deg", "count"])
        for i, count in enumerate(report.histogram):
            writer.writerow([f"{i * BIN_WIDTH_DEG:g}", count])


def time_fast_fedul(
    model: MlpModel, store: UpdateStore, target: int, alpha: float, repeats: int = 3
) -> float:
    """Best-of-`repeats` wall time of the unlearning recursion, in seconds."""
    cfg = UnlearnConfig(target_client=target, alpha=alpha)
    best = math.inf
    for _ in range(max(1, repeats)):
        started = time.perf_counter()
        fast_fedul(model, store, cfg)
        best = min(best, time.perf_counter() - started)
    return best

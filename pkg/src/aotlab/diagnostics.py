"""Evaluation metric, rollout, propagation gains, and the mixing-matrix probe.

The gain analysis and the probe both read the per-sub-layer stream-mixing
matrices captured during forward passes.  Gains use induced norms: forward
gain is the maximum absolute row sum, backward gain the maximum absolute
column sum.  Composite gains chain the matrices from a starting sub-layer to
the last one, with later sub-layers on the left of the product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import TrajectoryDataset
from .errors import NumericOverflowError, ShapeError


# ---------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------

def l2re(pred: np.ndarray, truth: np.ndarray, batched: bool | None = None) -> float:
    """Relative L2 error; per-sample ratio averaged over the leading axis.

    1-D inputs are treated as a single sample unless ``batched`` says
    otherwise.  A zero-norm truth sample makes the ratio undefined.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} vs truth shape {truth.shape}")
    if batched is None:
        batched = pred.ndim > 1
    if not batched:
        pred, truth = pred[None], truth[None]
    b = pred.shape[0]
    diff = (pred - truth).reshape(b, -1).astype(np.float64)
    ref = truth.reshape(b, -1).astype(np.float64)
    norms = np.linalg.norm(ref, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm truth sample; relative error undefined")
    return float(np.mean(np.linalg.norm(diff, axis=1) / norms))


# ---------------------------------------------------------------------
# autoregressive rollout
# ---------------------------------------------------------------------

@dataclass
class RolloutResult:
    frames: np.ndarray            # (steps_completed, H, W, C)
    errors: list = field(default_factory=list)
    blowup_step: int | None = None


def model_predictor(model):
    """Adapt a model to the (T_in, H, W, C) -> (H, W, C) rollout contract."""
    def predict(window: np.ndarray) -> np.ndarray:
        out = model.forward(Tensor(window.astype(model.dtype)[None]))
        return out.data[0]
    return predict


def rollout(predict, initial_window: np.ndarray, horizon: int,
            reference: np.ndarray | None = None, on_step=None) -> RolloutResult:
    """Feed predictions back through a sliding window for ``horizon`` steps.

    On numeric blow-up the partial trajectory is returned with the failing
    step recorded.  ``on_step(step, window)`` fires before each prediction.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    window = np.array(initial_window)
    if reference is not None and len(reference) < horizon:
        raise ShapeError(f"reference has {len(reference)} frames, "
                         f"horizon is {horizon}")
    frames, errors = [], []
    blowup = None
    for step in range(horizon):
        if on_step is not None:
            on_step(step, window)
        try:
            pred = predict(window)
        except NumericOverflowError:
            blowup = step
            break
        if not np.all(np.isfinite(pred)):
            blowup = step
            break
        frames.append(pred)
        if reference is not None:
            errors.append(l2re(pred, np.asarray(reference[step],
                                                dtype=pred.dtype),
                               batched=False))
        window = np.concatenate([window[1:], pred[None]])
    stacked = (np.stack(frames) if frames
               else np.empty((0,) + window.shape[1:], dtype=window.dtype))
    return RolloutResult(stacked, errors, blowup)


# ---------------------------------------------------------------------
# propagation gains
# ---------------------------------------------------------------------

def forward_gain(t: np.ndarray) -> np.ndarray:
    """Maximum absolute row sum (induced infinity norm), batched."""
    return np.max(np.sum(np.abs(t), axis=-1), axis=-1)


def backward_gain(t: np.ndarray) -> np.ndarray:
    """Maximum absolute column sum (induced 1-norm), batched."""
    return np.max(np.sum(np.abs(t), axis=-2), axis=-1)


@dataclass
class GainReport:
    forward: list                 # per sub-layer, averaged over inputs
    backward: list
    composite_forward: list       # per starting sub-layer index
    composite_backward: list
    n_inputs: int

    @property
    def n_sublayers(self) -> int:
        return len(self.forward)


def gains_from_matrices(mats: list) -> GainReport:
    """Build the report from per-sub-layer (S, n, n) matrix stacks."""
    if not mats:
        raise ValueError("need at least one sub-layer of matrices")
    fwd = [float(np.mean(forward_gain(t))) for t in mats]
    bwd = [float(np.mean(backward_gain(t))) for t in mats]
    comp_f, comp_b = [None] * len(mats), [None] * len(mats)
    prod = None
    for l in range(len(mats) - 1, -1, -1):
        prod = mats[l] if prod is None else prod @ mats[l]
        comp_f[l] = float(np.mean(forward_gain(prod)))
        comp_b[l] = float(np.mean(backward_gain(prod)))
    return GainReport(fwd, bwd, comp_f, comp_b, mats[0].shape[0])


def gain_analysis(model, probe_inputs: np.ndarray) -> GainReport:
    """Capture every stream-mixing matrix over the probe batch and grade it."""
    probe_inputs = np.asarray(probe_inputs)
    if probe_inputs.ndim == 4:
        probe_inputs = probe_inputs[None]
    if probe_inputs.shape[0] < 1:
        raise ValueError("need at least one probe input")
    collected: list = []
    model.forward(Tensor(probe_inputs.astype(model.dtype)),
                  collect_maps=collected)
    return gains_from_matrices([m.t.data for m in collected])


def write_gain_csv(report: GainReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# composite product chains T_{L-1} @ ... @ T_l; later "
                 "sub-layers multiply from the left\n")
        fh.write("sublayer,forward_gain,backward_gain\n")
        for l in range(report.n_sublayers):
            fh.write(f"{l},{report.forward[l]!r},{report.backward[l]!r}\n")
        fh.write("\nstart_index,composite_forward,composite_backward\n")
        for l in range(report.n_sublayers):
            fh.write(f"{l},{report.composite_forward[l]!r},"
                     f"{report.composite_backward[l]!r}\n")


# ---------------------------------------------------------------------
# mixing-matrix nearest-centroid probe
# ---------------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    confusion: np.ndarray         # (K, K) counts indexed [true, predicted]
    families: list
    features: np.ndarray          # every sample's feature vector
    labels: list                  # family label per feature row


def extract_probe_features(model, ds: TrajectoryDataset):
    """Flattened mixing matrices of every sub-layer for each trajectory.

    Each trajectory contributes its trailing window (the final t_in frames),
    where dynamics have pulled the state away from the shared initial
    condition distribution and the mixing response is most family specific.
    The feature vector is the concatenation over sub-layers of the flattened
    matrix, giving a fixed length of sublayers * streams^2 per sample.
    """
    t_in = model.cfg.t_in
    windows = np.stack([t[len(t) - t_in:] for t in ds.trajectories])
    collected: list = []
    model.forward(Tensor(windows.astype(model.dtype)), collect_maps=collected)
    features = np.concatenate(
        [m.t.data.reshape(len(ds), -1) for m in collected], axis=1)
    return features.astype(np.float64), list(ds.labels)


def nearest_centroid_classify(centroids: np.ndarray,
                              queries: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per query; ties go to the lowest index."""
    dists = np.linalg.norm(queries[:, None, :] - centroids[None, :, :], axis=2)
    return np.argmin(dists, axis=1)


def probe_from_features(features: np.ndarray, labels: list) -> ProbeResult:
    """Split each family in half, form centroids, classify the held-out half."""
    families = sorted(set(labels))
    by_family = {fam: [i for i, lab in enumerate(labels) if lab == fam]
                 for fam in families}
    for fam, idxs in by_family.items():
        if len(idxs) < 2:
            raise ValueError(f"family {fam!r} has {len(idxs)} sample(s); "
                             f"need at least 2")
    centroids, queries, truth = [], [], []
    for k, fam in enumerate(families):
        idxs = by_family[fam]
        half = len(idxs) // 2
        centroids.append(features[idxs[:half]].mean(axis=0))
        queries.extend(idxs[half:])
        truth.extend([k] * (len(idxs) - half))
    assigned = nearest_centroid_classify(np.stack(centroids), features[queries])
    truth = np.asarray(truth)
    confusion = np.zeros((len(families), len(families)), dtype=np.int64)
    for t_k, p_k in zip(truth, assigned):
        confusion[t_k, p_k] += 1
    accuracy = float(np.mean(assigned == truth))
    return ProbeResult(accuracy, confusion, families,
                       np.asarray(features), list(labels))


def kernel_probe(model, ds: TrajectoryDataset) -> ProbeResult:
    features, labels = extract_probe_features(model, ds)
    return probe_from_features(features, labels)


def write_probe_features(path: str, features: np.ndarray, labels: list) -> None:
    d = features.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for lab, row in zip(labels, features):
            fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")

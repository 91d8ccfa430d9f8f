"""Cliff-weighted training: loss, adaptive weight controller, and loop.

The objective is mean absolute error plus lambda_t times a
severity-weighted error term, implemented through per-sample weights
(1 + lambda_t * s_i) so any predictor that supports weighted
subgradient steps plugs in. After each epoch a validation pass
measures the MAE gap between the highest- and lowest-severity
validation quartiles; an exponential moving average of that gap
drives lambda_t up when cliff-heavy molecules lag and down when they
are overfit, clipped to a fixed band around lambda_base.

Everything is seeded and single-threaded over batches, so a trace is
reproducible bit for bit. Prediction never reads severity data; the
scores only shape training weights and diagnostics.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SchemaError


@dataclass(frozen=True)
class ControllerConfig:
    lambda_base: float = 0.1
    gamma: float = 4.0
    s_min: float = 0.25
    s_max: float = 4.0
    ema_alpha: float = 0.7
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lambda_base < 0.0:
            raise ValueError(f"lambda_base must be >= 0, got {self.lambda_base}")
        if not 0.0 < self.s_min <= 1.0 <= self.s_max:
            raise ValueError(f"need 0 < s_min <= 1 <= s_max, got {self.s_min}, {self.s_max}")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError(f"ema_alpha must be in [0,1), got {self.ema_alpha}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass
class ControllerState:
    lambda_t: float
    g_bar: float
    epoch: int


def cliff_loss(preds, targets, scores, lam: float) -> tuple[float, float, float]:
    """(total, base, cliff) losses; total = base + lam * cliff.

    base is plain MAE, cliff the severity-weighted MAE mean(s_i * |e_i|).
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if not (preds.shape == targets.shape == scores.shape):
        raise DimensionError(
            f"length mismatch: preds {preds.shape}, targets {targets.shape}, "
            f"scores {scores.shape}"
        )
    if scores.size and scores.min() < 0.0:
        raise ValueError("severity scores must be nonnegative")
    err = np.abs(preds - targets)
    base = float(err.mean())
    cliff = float((scores * err).mean())
    return base + lam * cliff, base, cliff


def gap_signal(mae_q4: float, mae_q1: float, epsilon: float) -> float:
    """Normalized Q4-vs-Q1 validation gap; positive means cliffs still lag."""
    return (mae_q4 - mae_q1) / (0.5 * (abs(mae_q4) + abs(mae_q1)) + epsilon)


def ema_update(g_bar_prev: float, g_t: float, ema_alpha: float) -> float:
    return ema_alpha * g_bar_prev + (1.0 - ema_alpha) * g_t


def lambda_update(g_bar: float, config: ControllerConfig) -> float:
    """lambda_base times exp(gamma * g_bar), clipped to [s_min, s_max] scaling."""
    scale = math.exp(config.gamma * g_bar)
    scale = min(max(scale, config.s_min), config.s_max)
    return config.lambda_base * scale


class Predictor:
    """Contract for pluggable regressors over fingerprint bit features."""

    def predict(self, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weighted_step(self, features, targets, weights, lr: float) -> None:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class LinearRegressor(Predictor):
    """Linear model over fingerprint bits plus bias, zero-initialized.

    weighted_step takes one subgradient step on mean(weights * |pred -
    y|); with all-zero weights the subgradient vanishes and parameters
    are untouched, as the contract requires. seed is accepted for
    contract symmetry; zero initialization needs no randomness.
    """

    kind = "linear"

    def __init__(self, width: int, seed: int = 0):
        del seed
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.width = width
        self.weights = np.zeros(width, dtype=np.float64)
        self.bias = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def gradient(self, features, targets, weights) -> tuple[np.ndarray, float]:
        """Analytic subgradient of mean(weights * |pred - y|) w.r.t. (weights, bias)."""
        err = self.predict(features) - targets
        g = np.sign(err) * weights
        return features.T @ g / len(targets), float(g.mean())

    def weighted_step(self, features, targets, weights, lr: float) -> None:
        grad_w, grad_b = self.gradient(features, targets, weights)
        self.weights -= lr * grad_w
        self.bias -= lr * grad_b

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "bias": self.bias,
            "weights": self.weights.tolist(),
        }


class ConstantRegressor(Predictor):
    """Intercept-only baseline predictor."""

    kind = "constant"

    def __init__(self, width: int = 0, seed: int = 0):
        del width, seed
        self.bias = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.full(features.shape[0], self.bias, dtype=np.float64)

    def weighted_step(self, features, targets, weights, lr: float) -> None:
        err = self.predict(features) - targets
        self.bias -= lr * float((np.sign(err) * weights).mean())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bias": self.bias}


PREDICTORS = {"linear": LinearRegressor, "constant": ConstantRegressor}


def build_predictor(kind: str, width: int, seed: int = 0) -> Predictor:
    if kind not in PREDICTORS:
        raise SchemaError(f"unknown predictor {kind!r}; choose from {sorted(PREDICTORS)}")
    return PREDICTORS[kind](width, seed)


def save_predictor(predictor: Predictor, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(predictor.to_dict(), handle, sort_keys=True)
        handle.write("\n")


def load_predictor(path: str) -> Predictor:
    with open(path, encoding="utf-8") as handle:
        blob = json.load(handle)
    kind = blob.get("kind")
    if kind == "linear":
        model = LinearRegressor(int(blob["width"]))
        weights = np.asarray(blob["weights"], dtype=np.float64)
        if weights.shape != (model.width,):
            raise SchemaError("model weights do not match declared width")
        model.weights = weights
        model.bias = float(blob["bias"])
        return model
    if kind == "constant":
        model = ConstantRegressor()
        model.bias = float(blob["bias"])
        return model
    raise SchemaError(f"unknown predictor kind {kind!r} in {path}")


def unpack_features(words: np.ndarray, width: int) -> np.ndarray:
    """Packed uint64 fingerprint rows to a float 0/1 feature matrix."""
    if words.shape[0] == 0:
        return np.zeros((0, width), dtype=np.float64)
    flat = np.unpackbits(words.astype("<u8").view(np.uint8), axis=1, bitorder="little")
    return flat[:, :width].astype(np.float64)


@dataclass(frozen=True)
class EpochStats:
    """One trace row; None marks group MAEs that had no members."""

    epoch: int
    base_loss: float
    cliff_loss: float
    lam: float
    g: float | None
    g_bar: float
    val_q1_mae: float | None
    val_q4_mae: float | None
    val_mae: float | None


TRACE_COLUMNS = (
    "epoch", "base_loss", "cliff_loss", "lambda", "g_bar",
    "val_q1_mae", "val_q4_mae", "val_mae",
)


def write_trace(trace: list[EpochStats], path: str) -> None:
    """Delimited per-epoch trace; undefined entries rendered as NA."""

    def text(v) -> str:
        return "NA" if v is None else repr(v)

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\t".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            handle.write(
                "\t".join(
                    (
                        str(row.epoch), repr(row.base_loss), repr(row.cliff_loss),
                        repr(row.lam), repr(row.g_bar), text(row.val_q1_mae),
                        text(row.val_q4_mae), text(row.val_mae),
                    )
                )
                + "\n"
            )


def _split_features(dataset, artifact, label: str):
    ids = sorted(mol_id for mol_id, lab in artifact.assignment.items() if lab == label)
    index = {mol_id: pos for pos, mol_id in enumerate(dataset.ids)}
    missing = [mol_id for mol_id in ids if mol_id not in index]
    if missing:
        raise SchemaError(f"artifact id {missing[0]!r} is not in the dataset")
    order = [index[mol_id] for mol_id in ids]
    words, _ = dataset.packed(order)
    width = dataset.width
    features = unpack_features(words, width)
    targets = dataset.targets()[order]
    return ids, features, targets


def train(
    dataset,
    artifact,
    predictor: Predictor,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    controller: ControllerConfig,
    seed: int = 0,
    use_cliff_term: bool = True,
) -> tuple[Predictor, list[EpochStats]]:
    """Seeded mini-batch training with the adaptive cliff weight.

    use_cliff_term=False trains the plain-MAE baseline; it shares this
    code path with lambda_base forced to 0, so its trace is
    bit-identical to a lambda_base=0 run. The first epoch uses
    lambda_base; each later epoch uses the controller output from the
    previous validation pass. If validation lacks Q1 or Q4 members the
    controller freezes at lambda_base with a one-time warning.
    """
    if epochs < 1 or batch_size < 1 or lr <= 0.0:
        raise ValueError("need epochs >= 1, batch_size >= 1, lr > 0")
    if not use_cliff_term:
        controller = dataclasses.replace(controller, lambda_base=0.0)
    train_ids, x_train, y_train = _split_features(dataset, artifact, "train")
    val_ids, x_val, y_val = _split_features(dataset, artifact, "val")
    if not train_ids:
        raise SchemaError("artifact assigns no molecules to train")
    try:
        scores = np.array([artifact.severity[mol_id].score for mol_id in train_ids])
        val_groups = np.array([artifact.severity[mol_id].group for mol_id in val_ids])
    except KeyError as exc:
        raise SchemaError(f"artifact lacks a severity record for id {exc.args[0]!r}") from None

    rng = np.random.default_rng(seed)
    lam = controller.lambda_base
    g_bar = 0.0
    starved = False
    q1_mask = val_groups == "Q1"
    q4_mask = val_groups == "Q4"
    trace: list[EpochStats] = []
    n = len(train_ids)

    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        abs_sum = 0.0
        weighted_sum = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            preds = predictor.predict(x_train[idx])
            err = np.abs(preds - y_train[idx])
            abs_sum += float(err.sum())
            weighted_sum += float((scores[idx] * err).sum())
            if use_cliff_term:
                batch_weights = 1.0 + lam * scores[idx]
            else:
                batch_weights = np.ones(len(idx), dtype=np.float64)
            predictor.weighted_step(x_train[idx], y_train[idx], batch_weights, lr)
        base_loss = abs_sum / n
        cliff_loss_value = weighted_sum / n

        val_err = np.abs(predictor.predict(x_val) - y_val)
        val_mae = float(val_err.mean()) if val_err.size else None
        q1 = float(val_err[q1_mask].mean()) if q1_mask.any() else None
        q4 = float(val_err[q4_mask].mean()) if q4_mask.any() else None

        if q1 is None or q4 is None:
            if not starved:
                starved = True
                warnings.warn(
                    "validation is missing Q1 or Q4 severity members; the cliff "
                    f"weight stays frozen at {controller.lambda_base}. Enlarge the "
                    "validation split or lower the similarity floor.",
                    RuntimeWarning,
                    stacklevel=2,
                )
            g = None
            lam_next = controller.lambda_base
        else:
            g = gap_signal(q4, q1, controller.epsilon)
            g_bar = ema_update(g_bar, g, controller.ema_alpha)
            lam_next = lambda_update(g_bar, controller)

        trace.append(
            EpochStats(epoch, base_loss, cliff_loss_value, lam, g, g_bar, q1, q4, val_mae)
        )
        lam = lam_next
    return predictor, trace

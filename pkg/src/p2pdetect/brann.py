"""Single-hidden-layer tanh network trained by Levenberg-Marquardt under
Bayesian regularization.

The objective is ``F = beta * E_D + alpha * E_W`` with ``E_D`` half the sum of
squared residuals and ``E_W`` half the sum of squared weights. After every
accepted step the hyperparameters are re-estimated with MacKay's evidence
approximation, using the Gauss-Newton Hessian ``A = beta * J'J + alpha * I``::

    gamma  = k - alpha * trace(A^-1)      (effective number of parameters)
    alpha' = gamma / (2 E_W)
    beta'  = (N - gamma) / (2 E_D)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import TARGET_NORM, Dataset, DatasetError, NormalizationParams, RankedFeatures, split
from .flow_meter.features import FEATURE_NAMES

log = logging.getLogger(__name__)

MODEL_FORMAT = "brann-model/1"
BETA_MAX = 1e10


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class StepFailure(np.linalg.LinAlgError):
    """The damped normal equations could not be solved at this damping."""


class ModelFileError(ValueError):
    pass


class MalformedModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class MissingFeatureError(KeyError):
    pass


def n_weights(n_in: int, n_hidden: int, n_out: int = 1) -> int:
    return (n_in + 1) * n_hidden + (n_hidden + 1) * n_out


@dataclass(frozen=True)
class NetworkModel:
    n_in: int
    n_hidden: int
    weights: np.ndarray
    feature_names: tuple[str, ...] = ()
    input_norm: NormalizationParams | None = None
    target_norm: NormalizationParams = TARGET_NORM
    alpha: float = 0.0
    beta: float = 1.0
    n_out: int = 1

    def __post_init__(self):
        if self.n_out != 1:
            raise ValueError("only a single output unit is supported")
        w = np.array(self.weights, dtype=float).reshape(-1)
        if len(w) != n_weights(self.n_in, self.n_hidden):
            raise ValueError(
                f"expected {n_weights(self.n_in, self.n_hidden)} weights for "
                f"{self.n_in}-{self.n_hidden}-1, got {len(w)}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.feature_names and len(self.feature_names) != self.n_in:
            raise ValueError("feature_names length differs from n_in")

    @property
    def k(self) -> int:
        return len(self.weights)

    def with_weights(self, w) -> "NetworkModel":
        return replace(self, weights=np.asarray(w, dtype=float))

    def unpack(self):
        return unpack_weights(self.weights, self.n_in, self.n_hidden)


def unpack_weights(w, n_in: int, n_hidden: int):
    """Split the flat vector into (W1 [h x n], b1 [h], w2 [h], b2)."""
    a = n_in * n_hidden
    W1 = w[:a].reshape(n_hidden, n_in)
    b1 = w[a:a + n_hidden]
    w2 = w[a + n_hidden:a + 2 * n_hidden]
    b2 = w[a + 2 * n_hidden]
    return W1, b1, w2, b2


def init_weights(n_in: int, n_hidden: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-0.5, 0.5] scaled by 1/sqrt(fan-in) of each layer."""
    w = np.empty(n_weights(n_in, n_hidden))
    a = n_in * n_hidden
    w[:a + n_hidden] = rng.uniform(-0.5, 0.5, a + n_hidden) / math.sqrt(n_in)
    w[a + n_hidden:] = rng.uniform(-0.5, 0.5, n_hidden + 1) / math.sqrt(n_hidden)
    return w


def _as_batch(model: NetworkModel, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise ValueError(f"expected inputs of width {model.n_in}, got shape {np.shape(X)}")
    return X, single


def _hidden_and_output(model: NetworkModel, X: np.ndarray):
    W1, b1, w2, b2 = model.unpack()
    H = np.tanh(X @ W1.T + b1)
    y = np.tanh(H @ w2 + b2)
    return H, y


def forward(model: NetworkModel, x):
    """Network output in (-1, 1) for one normalized input vector or a batch."""
    X, single = _as_batch(model, x)
    _, y = _hidden_and_output(model, X)
    return float(y[0]) if single else y


def _check_batch(X, t):
    t = np.asarray(t, dtype=float).reshape(-1)
    if len(t) == 0:
        raise ValueError("empty batch")
    if len(np.atleast_2d(X)) != len(t):
        raise ValueError("inputs and targets differ in length")
    return t


def residuals(model: NetworkModel, X, t) -> np.ndarray:
    t = _check_batch(X, t)
    return np.atleast_1d(forward(model, np.atleast_2d(X))) - t


def data_error(model: NetworkModel, X, t) -> float:
    """E_D: half the sum of squared residuals over the batch."""
    r = residuals(model, X, t)
    return 0.5 * float(r @ r)


def weight_error(model: NetworkModel) -> float:
    """E_W: half the sum of squared weights and biases."""
    w = model.weights
    return 0.5 * float(w @ w)


def jacobian(model: NetworkModel, X) -> np.ndarray:
    """d(residual_m)/d(w_j) for every instance, shape (N, k)."""
    X, _ = _as_batch(model, X)
    _, _, w2, _ = model.unpack()
    H, y = _hidden_and_output(model, X)
    d_out = 1.0 - y * y                               # dy/d(output pre-activation)
    d_hid = d_out[:, None] * w2[None, :] * (1.0 - H * H)  # dy/d(hidden pre-activation)
    N = len(X)
    J = np.empty((N, model.k))
    a = model.n_in * model.n_hidden
    h = model.n_hidden
    J[:, :a] = (d_hid[:, :, None] * X[:, None, :]).reshape(N, a)
    J[:, a:a + h] = d_hid
    J[:, a + h:a + 2 * h] = d_out[:, None] * H
    J[:, a + 2 * h] = d_out
    return J


def lm_direction(J, r, w, alpha: float, beta: float, mu: float) -> np.ndarray:
    """Solve ``(beta J'J + (alpha + mu) I) delta = -(beta J'r + alpha w)``."""
    J = np.asarray(J, dtype=float)
    k = J.shape[1]
    A = beta * (J.T @ J)
    A[np.diag_indices(k)] += alpha + mu
    g = beta * (J.T @ r) + alpha * np.asarray(w, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise StepFailure(f"damped Hessian not positive definite at mu={mu:g}") from exc
    z = np.linalg.solve(L, -g)
    delta = np.linalg.solve(L.T, z)
    if not np.all(np.isfinite(delta)):
        raise StepFailure(f"non-finite step at mu={mu:g}")
    return delta


def objective(model: NetworkModel, X, t, alpha: float, beta: float) -> float:
    return beta * data_error(model, X, t) + alpha * weight_error(model)


def lm_step(model: NetworkModel, X, t, alpha: float, beta: float, mu: float):
    """One damped Gauss-Newton proposal. Returns ``(candidate_weights, dF)``;
    the caller accepts it only when ``dF < 0``."""
    t = _check_batch(X, t)
    r = residuals(model, X, t)
    J = jacobian(model, X)
    delta = lm_direction(J, r, model.weights, alpha, beta, mu)
    w_new = model.weights + delta
    f_old = beta * 0.5 * float(r @ r) + alpha * weight_error(model)
    f_new = objective(model.with_weights(w_new), X, t, alpha, beta)
    return w_new, f_new - f_old


class HyperUpdate(NamedTuple):
    alpha: float
    beta: float
    gamma: float
    perfect_fit: bool = False


def effective_parameters(JtJ, alpha: float, beta: float) -> float:
    """gamma = k - alpha * trace((beta J'J + alpha I)^-1), via eigenvalues.

    Written as the sum of ``beta*l / (beta*l + alpha)`` over eigenvalues ``l``
    of ``J'J`` so that it stays in ``[0, rank(J'J)]`` and has a defined limit
    at ``alpha = 0`` when ``J'J`` is singular.
    """
    lam = np.clip(np.linalg.eigvalsh(np.asarray(JtJ, dtype=float)), 0.0, None)
    s = beta * lam
    if alpha > 0:
        terms = s / (s + alpha)
    else:
        tol = s.max(initial=0.0) * len(s) * np.finfo(float).eps
        terms = (s > tol).astype(float)
    return float(np.clip(terms.sum(), 0.0, len(lam)))


def update_hyperparams(model: NetworkModel, X, t, alpha: float, beta: float,
                       J: np.ndarray | None = None) -> HyperUpdate:
    """Evidence-framework re-estimation of (alpha, beta)."""
    t = _check_batch(X, t)
    if J is None:
        J = jacobian(model, X)
    N = len(t)
    gamma = effective_parameters(J.T @ J, alpha, beta)
    e_d = data_error(model, X, t)
    e_w = weight_error(model)
    alpha_new = gamma / (2.0 * e_w) if e_w > 0 else 0.0
    perfect = e_d == 0.0
    if perfect:
        beta_new = BETA_MAX
    elif N - gamma <= 0:
        # every data point is absorbed by a parameter; no evidence for a new noise level
        beta_new = beta
    else:
        beta_new = min((N - gamma) / (2.0 * e_d), BETA_MAX)
    return HyperUpdate(alpha_new, beta_new, gamma, perfect)


@dataclass
class TrainingConfig:
    hidden_range: tuple[int, int] = (2, 20)
    max_epochs: int = 300
    mu_init: float = 0.005
    mu_increase: float = 10.0
    mu_decrease: float = 0.1
    mu_max: float = 1e10
    gradient_tol: float = 1e-7
    objective_tol: float = 1e-9
    seed: int = 0
    train_fraction: float = 0.9
    alpha_init: float = 0.0
    beta_init: float = 1.0
    workers: int = 1

    def __post_init__(self):
        lo, hi = self.hidden_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad hidden range {self.hidden_range}")
        if not (self.mu_increase > 1 > self.mu_decrease > 0):
            raise ValueError("need mu_increase > 1 > mu_decrease > 0")
        if min(self.max_epochs, self.mu_init, self.mu_max, self.gradient_tol, self.objective_tol) <= 0:
            raise ValueError("training tolerances must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    def hidden_sizes(self) -> range:
        return range(self.hidden_range[0], self.hidden_range[1] + 1)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    e_d: float
    e_w: float
    f: float            # objective after the step, under the step's (alpha, beta)
    f_before: float     # objective before the step, same (alpha, beta)
    step_alpha: float
    step_beta: float
    alpha: float        # re-estimated for the next epoch
    beta: float
    gamma: float
    mu: float

    @property
    def sse(self) -> float:
        return 2.0 * self.e_d


@dataclass
class TrainingReport:
    trace: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    n_hidden: int = 0
    heldout_r: float | None = None
    sweep: dict[int, float] = field(default_factory=dict)
    train_rows: int = 0

    @property
    def gamma(self) -> float:
        return self.trace[-1].gamma if self.trace else float("nan")

    def to_dict(self) -> dict:
        return {
            "n_hidden": self.n_hidden,
            "stop_reason": self.stop_reason,
            "heldout_r": self.heldout_r,
            "train_rows": self.train_rows,
            "sweep": {str(h): r for h, r in sorted(self.sweep.items())},
            "trace": [rec.__dict__ | {"sse": rec.sse} for rec in self.trace],
        }


def fit_weights(model: NetworkModel, X, t, cfg: TrainingConfig) -> tuple[NetworkModel, TrainingReport]:
    """Run LM with evidence updates from ``model``'s weights on normalized data."""
    X = np.asarray(X, dtype=float)
    t = _check_batch(X, t)
    report = TrainingReport(n_hidden=model.n_hidden, train_rows=len(t))
    alpha, beta, mu = cfg.alpha_init, cfg.beta_init, cfg.mu_init
    w = model.weights.copy()
    cur = model.with_weights(w)
    r = residuals(cur, X, t)
    J = jacobian(cur, X)
    stop = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        e_d = 0.5 * float(r @ r)
        e_w = 0.5 * float(w @ w)
        f_before = beta * e_d + alpha * e_w
        grad = beta * (J.T @ r) + alpha * w
        if float(np.linalg.norm(grad)) < cfg.gradient_tol:
            stop = "gradient"
            break
        accepted = None
        while mu <= cfg.mu_max:
            try:
                delta = lm_direction(J, r, w, alpha, beta, mu)
            except StepFailure:
                mu *= cfg.mu_increase
                continue
            w_try = w + delta
            cand = cur.with_weights(w_try)
            r_try = residuals(cand, X, t)
            f_try = beta * 0.5 * float(r_try @ r_try) + alpha * 0.5 * float(w_try @ w_try)
            if f_try < f_before:
                accepted = (w_try, cand, r_try, f_try)
                break
            mu *= cfg.mu_increase
        if accepted is None:
            stop = "mu_max"
            break
        mu = max(mu * cfg.mu_decrease, 1e-20)
        w, cur, r, f_after = accepted
        if not math.isfinite(f_after):
            raise TrainingDiverged(f"objective became non-finite at epoch {epoch}", report.trace)
        J = jacobian(cur, X)
        hyp = update_hyperparams(cur, X, t, alpha, beta, J=J)
        report.trace.append(EpochRecord(
            epoch=epoch,
            e_d=0.5 * float(r @ r),
            e_w=0.5 * float(w @ w),
            f=f_after,
            f_before=f_before,
            step_alpha=alpha,
            step_beta=beta,
            alpha=hyp.alpha,
            beta=hyp.beta,
            gamma=hyp.gamma,
            mu=mu,
        ))
        alpha, beta = hyp.alpha, hyp.beta
        if not (math.isfinite(alpha) and math.isfinite(beta)):
            raise TrainingDiverged(f"hyperparameters non-finite at epoch {epoch}", report.trace)
        if abs(f_before - f_after) <= cfg.objective_tol * max(abs(f_before), 1e-300):
            stop = "objective"
            break
    report.stop_reason = stop
    return replace(cur, alpha=alpha, beta=beta), report


def _names(selected) -> tuple[str, ...]:
    if isinstance(selected, RankedFeatures):
        return selected.names
    return tuple(selected)


def _pearson_or_nan(a, b) -> float:
    from .stats_eval import StatsError, pearson

    try:
        return pearson(a, b)
    except StatsError:
        return float("nan")


def train(ds: Dataset, selected, cfg: TrainingConfig | None = None, n_hidden: int | None = None,
          holdout: Dataset | None = None) -> tuple[NetworkModel, TrainingReport]:
    """Train on every row of ``ds`` using the ``selected`` input features.

    Input scaling is fitted on ``ds``. Without ``n_hidden`` the hidden size is
    chosen first by :func:`select_hidden`. ``holdout``, when given, supplies
    the held-out correlation recorded in the report.
    """
    cfg = cfg or TrainingConfig()
    names = _names(selected)
    if not ds.labeled:
        raise DatasetError("training needs labels")
    if len(ds) < 10:
        raise DatasetError(f"training needs at least 10 rows, got {len(ds)}")
    sweep = {}
    if n_hidden is None:
        n_hidden, sweep = select_hidden(ds, names, cfg)
    sub = ds.select(names)
    norm = NormalizationParams.fit(sub.X)
    X = norm.transform(sub.X, clamp=False)
    t = TARGET_NORM.transform(sub.y.astype(float), clamp=False)
    rng = np.random.default_rng(cfg.seed + n_hidden)
    model = NetworkModel(len(names), n_hidden, init_weights(len(names), n_hidden, rng),
                         names, norm, TARGET_NORM)
    model, report = fit_weights(model, X, t, cfg)
    report.sweep = sweep
    if holdout is not None and len(holdout):
        scores = predict_scores(model, holdout.select(names).X)
        report.heldout_r = _pearson_or_nan(holdout.y.astype(float), scores)
    log.info("trained %d-%d-1: stop=%s gamma=%.2f/%d heldout_r=%s",
             model.n_in, n_hidden, report.stop_reason, report.gamma, model.k, report.heldout_r)
    return model, report


def select_hidden(ds: Dataset, selected, cfg: TrainingConfig | None = None) -> tuple[int, dict[int, float]]:
    """Pick the hidden size with the best held-out Pearson correlation.

    ``ds`` is split (stratified, ``cfg.train_fraction``) into fitting and
    validation parts; ties go to the smaller network. Candidates whose
    training fails are recorded as NaN and skipped.
    """
    cfg = cfg or TrainingConfig()
    names = _names(selected)
    sizes = list(cfg.hidden_sizes())
    if len(sizes) == 1:
        return sizes[0], {sizes[0]: float("nan")}
    fit_part, val_part = split(ds, cfg.train_fraction, cfg.seed)

    def run(h):
        try:
            _, rep = train(fit_part, names, cfg, n_hidden=h, holdout=val_part)
            return rep.heldout_r if rep.heldout_r is not None else float("nan")
        except (TrainingError, np.linalg.LinAlgError) as exc:
            log.warning("hidden size %d skipped: %s", h, exc)
            return float("nan")

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, sizes))
    else:
        results = [run(h) for h in sizes]
    correlations = dict(zip(sizes, results))
    return choose_hidden(correlations), correlations


def choose_hidden(correlations: dict[int, float]) -> int:
    best_h, best_r = None, -math.inf
    for h in sorted(correlations):
        r = correlations[h]
        if math.isnan(r):
            continue
        if r > best_r:
            best_h, best_r = h, r
    if best_h is None:
        raise TrainingError("no hidden size produced a usable model")
    return best_h


# --- inference -------------------------------------------------------------------


def raw_scores(model: NetworkModel, X_raw) -> np.ndarray:
    """Denormalized network output before clamping, one per row of raw features."""
    X = model.input_norm.transform(np.atleast_2d(np.asarray(X_raw, dtype=float)), clamp=True)
    y = np.atleast_1d(forward(model, X))
    return model.target_norm.inverse(y[:, None])[:, 0]


def predict_scores(model: NetworkModel, X_raw) -> np.ndarray:
    return np.clip(raw_scores(model, X_raw), 0.0, 1.0)


def model_inputs(model: NetworkModel, fv) -> np.ndarray:
    if isinstance(fv, dict):
        values = fv
    else:
        values = dict(zip(FEATURE_NAMES, fv.numeric_row()))
    missing = [n for n in model.feature_names if n not in values]
    if missing:
        raise MissingFeatureError(f"flow lacks model features: {', '.join(missing)}")
    return np.array([float(values[n]) for n in model.feature_names])


def classify(model: NetworkModel, fv, threshold: float = 0.5) -> tuple[float, int]:
    """Score one flow in [0, 1]; label 1 (malicious) iff score >= threshold."""
    score = float(predict_scores(model, model_inputs(model, fv))[0])
    return score, int(score >= threshold)


# --- persistence ------------------------------------------------------------------


def _payload(model: NetworkModel) -> dict:
    return {
        "layout": {"n_in": model.n_in, "n_hidden": model.n_hidden, "n_out": model.n_out},
        "activation": "tansig",
        "feature_names": list(model.feature_names),
        "input_norm": {"x_min": list(model.input_norm.x_min), "x_max": list(model.input_norm.x_max)},
        "target_norm": {"x_min": list(model.target_norm.x_min), "x_max": list(model.target_norm.x_max)},
        "alpha": float(model.alpha),
        "beta": float(model.beta),
        "weights": [float(v) for v in model.weights],
    }


def _payload_text(model: NetworkModel) -> str:
    return json.dumps(_payload(model), indent=1, sort_keys=True, allow_nan=False)


def model_id(model: NetworkModel) -> str:
    return hashlib.sha256(_payload_text(model).encode()).hexdigest()[:12]


def save_model(model: NetworkModel, path) -> str:
    if model.input_norm is None:
        raise ValueError("model has no input normalization; train it first")
    body = MODEL_FORMAT + "\n" + _payload_text(model) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    Path(path).write_text(body + f"sha256 {digest}\n", encoding="utf-8")
    return digest


def load_model(path) -> NetworkModel:
    text = Path(path).read_text(encoding="utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("brann-model/"):
        raise MalformedModelError(f"{path}: not a brann model file")
    if first != MODEL_FORMAT:
        raise ModelVersionError(f"{path}: unsupported format {first!r} (expected {MODEL_FORMAT})")
    body, sep, tail = text.rstrip("\n").rpartition("\n")
    if not sep or not tail.startswith("sha256 "):
        raise MalformedModelError(f"{path}: missing checksum line")
    body += "\n"
    if hashlib.sha256(body.encode()).hexdigest() != tail.split(" ", 1)[1].strip():
        raise MalformedModelError(f"{path}: checksum mismatch")
    try:
        p = json.loads(body[len(first) + 1:])
        layout = p["layout"]
        return NetworkModel(
            n_in=int(layout["n_in"]),
            n_hidden=int(layout["n_hidden"]),
            n_out=int(layout["n_out"]),
            weights=np.array(p["weights"], dtype=float),
            feature_names=tuple(p["feature_names"]),
            input_norm=NormalizationParams(tuple(p["input_norm"]["x_min"]), tuple(p["input_norm"]["x_max"])),
            target_norm=NormalizationParams(tuple(p["target_norm"]["x_min"]), tuple(p["target_norm"]["x_max"])),
            alpha=float(p["alpha"]),
            beta=float(p["beta"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedModelError(f"{path}: {exc}") from exc


def feature_check(model: NetworkModel, available: Sequence[str] = FEATURE_NAMES) -> None:
    """Raise :class:`MissingFeatureError` if the model needs a feature that is not produced."""
    missing = [n for n in model.feature_names if n not in available]
    if missing:
        raise MissingFeatureError(f"model uses unknown features: {', '.join(missing)}")

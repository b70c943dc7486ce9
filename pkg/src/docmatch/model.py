"""Hybrid latent-factor ranking model over patient and doctor feature sets.

An entity's representation is the sum of the embeddings of its features
(plus a summed per-feature bias), so patients sharing demographics share
representation mass and a brand-new patient still gets a usable vector from
demographics alone. Pair scores are the inner product of the two sums put
through a sigmoid. Training minimizes a rank-weighted pairwise hinge loss
with per-parameter adaptive learning rates.

Trust weights can steer training in two ways: ``sample`` draws positive
pairs proportionally to trust, ``gradient`` keeps a uniform sweep but scales
each pair's update by its trust (normalized to mean one). ``off`` is the
unweighted model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _warp
from .errors import ConfigError, NumericalError, ValidationError
from .ingest import FeatureAssignments, InteractionLog

TRUST_MODES = ("off", "sample", "gradient")
_TRUST_MODE_ALIASES = {"sample_weight": "sample", "gradient_weight": "gradient"}

MODEL_FORMAT = "docmatch-model v1"

# Embedding initialization snaps to this grid so feature sums are exact
# integer arithmetic at any association order.
_INIT_GRID = 2.0 ** 24


@dataclass(frozen=True)
class Hyperparams:
    """Training settings. ``lam`` is the trust decay rate (written as
    ``lambda`` in serialized form)."""

    learning_rate: float = 0.012
    epochs: int = 120
    lam: float = 0.3
    no_components: int = 95
    max_sampled: int = 3
    margin: float = 1.0
    bias_enabled: bool = True
    init_scale: float = 1.0
    rng_seed: int = 0
    trust_mode: str = "off"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.no_components < 1:
            raise ConfigError("no_components must be >= 1")
        if self.max_sampled < 1:
            raise ConfigError("max_sampled must be >= 1")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.init_scale <= 0:
            raise ConfigError("init_scale must be > 0")
        mode = _TRUST_MODE_ALIASES.get(self.trust_mode, self.trust_mode)
        if mode not in TRUST_MODES:
            raise ConfigError(
                f"unknown trust_mode {self.trust_mode!r}; expected one of "
                f"{', '.join(TRUST_MODES)}"
            )
        object.__setattr__(self, "trust_mode", mode)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Hyperparams":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    @classmethod
    def from_config(cls, view) -> "Hyperparams":
        kwargs = {}
        if view.has("model.learning_rate"):
            kwargs["learning_rate"] = view.get_float("model.learning_rate")
        if view.has("model.epochs"):
            kwargs["epochs"] = view.get_int("model.epochs")
        if view.has("model.lambda"):
            kwargs["lam"] = view.get_float("model.lambda")
        if view.has("model.no_components"):
            kwargs["no_components"] = view.get_int("model.no_components")
        if view.has("model.max_sampled"):
            kwargs["max_sampled"] = view.get_int("model.max_sampled")
        if view.has("model.margin"):
            kwargs["margin"] = view.get_float("model.margin")
        if view.has("model.bias_enabled"):
            kwargs["bias_enabled"] = view.get_bool("model.bias_enabled")
        if view.has("model.init_scale"):
            kwargs["init_scale"] = view.get_float("model.init_scale")
        if view.has("model.rng_seed"):
            kwargs["rng_seed"] = view.get_int("model.rng_seed")
        if view.has("model.trust_mode"):
            kwargs["trust_mode"] = view.get_str("model.trust_mode")
        return cls(**kwargs)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    mean_attempts: float
    n_skipped: int
    n_updates: int


@dataclass(frozen=True)
class ScoredDoctor:
    doctor_index: int
    score: float  # sigmoid(raw), in (0, 1)
    raw: float


def stable_sigmoid(x: float) -> float:
    """Logistic function without overflow for large |x|."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(values * _INIT_GRID) / _INIT_GRID


def _csr(feature_lists: list[tuple[int, ...]]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(feature_lists) + 1, dtype=np.int32)
    for k, feats in enumerate(feature_lists):
        ptr[k + 1] = ptr[k] + len(feats)
    idx = np.empty(int(ptr[-1]), dtype=np.int32)
    for k, feats in enumerate(feature_lists):
        idx[ptr[k]:ptr[k + 1]] = feats
    return idx, ptr


def harmonic_table(n: int) -> np.ndarray:
    """``table[r]`` is the r-th harmonic number, ``table[0]`` is zero."""
    table = np.zeros(n + 1)
    for r in range(1, n + 1):
        table[r] = table[r - 1] + 1.0 / r
    return table


class _TrainingPlan:
    """Arrays the epoch kernel needs, fixed for one (log, trust) binding."""

    def __init__(self, model: "HybridModel", log: InteractionLog, trust,
                 trust_normalization: str):
        hp = model.hyperparams
        pairs = sorted(log.pairs())
        if not pairs:
            raise ValidationError("training log has no interaction pairs")
        self.n_pos = len(pairs)
        self.pos_pat = np.array([p for p, _ in pairs], dtype=np.int32)
        self.pos_doc = np.array([d for _, d in pairs], dtype=np.int32)

        if hp.trust_mode != "off":
            if trust is None:
                from .trust import trust_matrix
                trust = trust_matrix(log, int(log.years.max()), hp.lam,
                                     trust_normalization)
            weights = np.empty(self.n_pos)
            for k, pair in enumerate(pairs):
                if pair not in trust:
                    raise ValidationError(
                        f"trust entry missing for pair {pair} under trust_mode "
                        f"{hp.trust_mode!r}"
                    )
                weights[k] = trust[pair]
            if not np.all(weights > 0):
                raise ValidationError("trust weights must be positive")
        else:
            weights = np.ones(self.n_pos)

        if hp.trust_mode == "sample":
            # scale-invariant normalization; equal weights reduce to exactly
            # the unweighted cumulative ladder 1, 2, 3, ...
            self.pos_cumweight = np.cumsum(weights / weights.max())
            self.grad_weight = np.ones(self.n_pos)
            self.mode = 0
        elif hp.trust_mode == "gradient":
            self.pos_cumweight = np.cumsum(np.ones(self.n_pos))
            self.grad_weight = weights * (self.n_pos / weights.sum())
            self.mode = 1
        else:
            self.pos_cumweight = np.cumsum(weights)
            self.grad_weight = np.ones(self.n_pos)
            self.mode = 0

        upos_lists: list[tuple[int, ...]] = [()] * log.n_patients
        by_patient: dict[int, list[int]] = {}
        for p_i, d_j in pairs:
            by_patient.setdefault(p_i, []).append(d_j)
        for p_i, docs in by_patient.items():
            upos_lists[p_i] = tuple(sorted(set(docs)))
        self.upos_idx, self.upos_ptr = _csr(upos_lists)
        self.n_doctors = log.n_doctors
        self.harmonic = harmonic_table(log.n_doctors)


class HybridModel:
    """Feature-sum factorization model with pairwise ranking training."""

    def __init__(self, features: FeatureAssignments, hyperparams: Hyperparams,
                 _init: bool = True):
        self.features = features
        self.hyperparams = hyperparams
        l = hyperparams.no_components
        f_p = features.n_patient_features
        f_d = features.n_doctor_features
        if _init:
            rng = np.random.default_rng(hyperparams.rng_seed)
            half_width = hyperparams.init_scale / math.sqrt(l)
            self.patient_emb = _quantize(rng.uniform(-half_width, half_width, (f_p, l)))
            self.doctor_emb = _quantize(rng.uniform(-half_width, half_width, (f_d, l)))
            self._epoch_rng = rng
        else:
            self.patient_emb = np.zeros((f_p, l))
            self.doctor_emb = np.zeros((f_d, l))
            self._epoch_rng = None
        self.patient_bias = np.zeros(f_p)
        self.doctor_bias = np.zeros(f_d)
        self.patient_emb_acc = np.zeros((f_p, l))
        self.doctor_emb_acc = np.zeros((f_d, l))
        self.patient_bias_acc = np.zeros(f_p)
        self.doctor_bias_acc = np.zeros(f_d)
        self.history: list[EpochStats] = []
        self._pat_idx, self._pat_ptr = _csr(features.patient_features)
        self._doc_idx, self._doc_ptr = _csr(features.doctor_features)

    # -- representation ----------------------------------------------------

    def represent_patient(self, feature_indices) -> tuple[np.ndarray, float]:
        """Sum of the given patient features' embeddings, and of their biases."""
        vec = np.zeros(self.hyperparams.no_components)
        bias = 0.0
        for f in feature_indices:
            if not 0 <= f < self.features.n_patient_features:
                raise ValidationError(f"patient feature index {f} out of vocabulary")
            vec += self.patient_emb[f]
            bias += self.patient_bias[f]
        return vec, bias

    def represent_doctor(self, feature_indices) -> tuple[np.ndarray, float]:
        vec = np.zeros(self.hyperparams.no_components)
        bias = 0.0
        for f in feature_indices:
            if not 0 <= f < self.features.n_doctor_features:
                raise ValidationError(f"doctor feature index {f} out of vocabulary")
            vec += self.doctor_emb[f]
            bias += self.doctor_bias[f]
        return vec, bias

    def patient_vector(self, patient: int) -> tuple[np.ndarray, float]:
        return self.represent_patient(self.features.patient_features[patient])

    def doctor_vector(self, doctor: int) -> tuple[np.ndarray, float]:
        return self.represent_doctor(self.features.doctor_features[doctor])

    # -- scoring -----------------------------------------------------------

    def raw_score(self, patient: int, doctor: int) -> float:
        p, b_i = self.patient_vector(patient)
        q, b_j = self.doctor_vector(doctor)
        raw = float(p @ q)
        if self.hyperparams.bias_enabled:
            raw += b_i + b_j
        return raw

    def predict(self, patient: int, doctor: int) -> ScoredDoctor:
        raw = self.raw_score(patient, doctor)
        return ScoredDoctor(doctor_index=doctor, score=stable_sigmoid(raw), raw=raw)

    def doctor_representation_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (n_doctors, l) matrix of doctor representations plus the
        summed-bias vector. Reflects the parameters at call time; recompute
        after further training."""
        rows = self.doctor_emb[self._doc_idx]
        table = np.add.reduceat(rows, self._doc_ptr[:-1], axis=0)
        biases = np.add.reduceat(self.doctor_bias[self._doc_idx], self._doc_ptr[:-1])
        return table, biases

    def raw_scores_from(self, p: np.ndarray, b_i: float, candidates: np.ndarray,
                        table: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        if table is None:
            table = self.doctor_representation_table()
        vectors, biases = table
        raws = vectors[candidates] @ p
        if self.hyperparams.bias_enabled:
            raws = raws + b_i + biases[candidates]
        return raws

    def rank_doctors(self, patient: int | None = None, n: int = 10,
                     candidates=None, feature_indices=None,
                     table: tuple[np.ndarray, np.ndarray] | None = None,
                     ) -> list[ScoredDoctor]:
        """Top-n candidate doctors by raw score, ties broken by lower index.

        Either ``patient`` (use its stored features) or ``feature_indices``
        (an explicit patient feature set) selects the query representation.
        Previously visited doctors are not excluded. Callers ranking many
        queries against fixed parameters can pass a precomputed
        ``doctor_representation_table()`` to skip rebuilding it.
        """
        if n < 1:
            raise ValidationError("n must be >= 1")
        if feature_indices is None:
            if patient is None:
                raise ValidationError("rank_doctors needs a patient or feature_indices")
            feature_indices = self.features.patient_features[patient]
        p, b_i = self.represent_patient(feature_indices)
        if candidates is None:
            candidates = np.arange(len(self.features.doctor_features))
        else:
            candidates = np.asarray(sorted(int(c) for c in candidates))
        if len(candidates) == 0:
            raise ValidationError("rank_doctors called with an empty candidate set")
        raws = self.raw_scores_from(p, b_i, candidates, table=table)
        order = np.lexsort((candidates, -raws))
        return [
            ScoredDoctor(doctor_index=int(candidates[k]),
                         score=stable_sigmoid(float(raws[k])),
                         raw=float(raws[k]))
            for k in order[:n]
        ]

    # -- training ----------------------------------------------------------

    def _run_epoch(self, plan: _TrainingPlan, seed: int) -> EpochStats:
        hp = self.hyperparams
        total_loss, total_attempts, n_skipped, n_updates, err_step = _warp.run_epoch(
            self.patient_emb, self.doctor_emb,
            self.patient_bias, self.doctor_bias,
            self.patient_emb_acc, self.doctor_emb_acc,
            self.patient_bias_acc, self.doctor_bias_acc,
            self._pat_idx, self._pat_ptr, self._doc_idx, self._doc_ptr,
            plan.pos_pat, plan.pos_doc, plan.pos_cumweight, plan.grad_weight,
            plan.upos_idx, plan.upos_ptr,
            plan.n_doctors, hp.learning_rate, hp.margin, hp.max_sampled,
            1 if hp.bias_enabled else 0,
            plan.harmonic, plan.mode, seed,
        )
        epoch_no = len(self.history) + 1
        if err_step >= 0 or not np.isfinite(total_loss):
            raise NumericalError(
                f"non-finite score during training (epoch {epoch_no}, "
                f"step {int(err_step)})",
                epoch=epoch_no, step=int(err_step),
            )
        stats = EpochStats(
            epoch=epoch_no,
            mean_loss=total_loss / plan.n_pos,
            mean_attempts=total_attempts / plan.n_pos,
            n_skipped=int(n_skipped),
            n_updates=int(n_updates),
        )
        self.history.append(stats)
        return stats

    def _next_epoch_seed(self) -> int:
        if self._epoch_rng is None:
            self._epoch_rng = np.random.default_rng(self.hyperparams.rng_seed)
        return int(self._epoch_rng.integers(0, 2**31 - 1))

    def warp_epoch(self, log: InteractionLog, trust=None, seed: int | None = None,
                   trust_normalization: str = "per_year") -> EpochStats:
        """Run one training epoch over the log's positive pairs."""
        plan = _TrainingPlan(self, log, trust, trust_normalization)
        if seed is None:
            seed = self._next_epoch_seed()
        return self._run_epoch(plan, seed)

    def fit(self, log: InteractionLog, trust=None,
            trust_normalization: str = "per_year") -> "HybridModel":
        """Train in place on the distinct (patient, doctor) pairs of ``log``.

        For the trust-driven modes a trust matrix is computed from the log
        (reference year = the log's last year) unless one is passed in.
        """
        plan = _TrainingPlan(self, log, trust, trust_normalization)
        for _ in range(self.hyperparams.epochs):
            self._run_epoch(plan, self._next_epoch_seed())
        return self

    # -- persistence ---------------------------------------------------------

    def _array_manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("patient_emb", self.patient_emb.shape),
            ("doctor_emb", self.doctor_emb.shape),
            ("patient_bias", self.patient_bias.shape),
            ("doctor_bias", self.doctor_bias.shape),
            ("patient_emb_acc", self.patient_emb_acc.shape),
            ("doctor_emb_acc", self.doctor_emb_acc.shape),
            ("patient_bias_acc", self.patient_bias_acc.shape),
            ("doctor_bias_acc", self.doctor_bias_acc.shape),
        ]

    def save(self, path: str | Path, provenance: dict[str, str] | None = None) -> None:
        """Write a one-line JSON header followed by raw little-endian float64
        blocks; equal models produce byte-identical files."""
        header = {
            "format": MODEL_FORMAT,
            "hyperparams": self.hyperparams.to_json_dict(),
            "feature_config": {
                "patient_namespaces": list(self.features.config.patient_namespaces),
                "doctor_namespaces": list(self.features.config.doctor_namespaces),
                "n_buckets": self.features.config.n_buckets,
            },
            "boundaries": {k: list(v) for k, v in sorted(self.features.boundaries.items())},
            "vocab_sha256": self.features.fingerprint(),
            "arrays": [[name, list(shape)] for name, shape in self._array_manifest()],
            "history": [
                [s.epoch, s.mean_loss, s.mean_attempts, s.n_skipped, s.n_updates]
                for s in self.history
            ],
            "provenance": dict(sorted((provenance or {}).items())),
        }
        blob = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
        parts = [blob]
        for name, _ in self._array_manifest():
            arr = np.ascontiguousarray(getattr(self, name), dtype="<f8")
            parts.append(arr.tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path, features: FeatureAssignments) -> "HybridModel":
        data = Path(path).read_bytes()
        newline = data.find(b"\n")
        if newline < 0:
            raise ValidationError(f"{path}: truncated model file")
        try:
            header = json.loads(data[:newline].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValidationError(f"{path}: model header is not valid JSON")
        if header.get("format") != MODEL_FORMAT:
            raise ValidationError(
                f"{path}: not a {MODEL_FORMAT!r} file (format {header.get('format')!r})"
            )
        if header["vocab_sha256"] != features.fingerprint():
            raise ValidationError(
                f"{path}: model was trained on a different feature vocabulary"
            )
        hyperparams = Hyperparams.from_json_dict(header["hyperparams"])
        model = cls(features, hyperparams, _init=False)
        offset = newline + 1
        for name, shape in header["arrays"]:
            shape = tuple(shape)
            count = int(np.prod(shape)) if shape else 1
            end = offset + count * 8
            if end > len(data):
                raise ValidationError(f"{path}: truncated array block {name!r}")
            arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
            setattr(model, name, arr)
            offset = end
        if offset != len(data):
            raise ValidationError(f"{path}: trailing bytes after array blocks")
        model.history = [
            EpochStats(epoch=int(e), mean_loss=float(ml), mean_attempts=float(ma),
                       n_skipped=int(ns), n_updates=int(nu))
            for e, ml, ma, ns, nu in header.get("history", [])
        ]
        return model


def fit(log: InteractionLog, features: FeatureAssignments, hyperparams: Hyperparams,
        trust=None, trust_normalization: str = "per_year") -> HybridModel:
    """Initialize a model for the feature vocabularies and train it on the log."""
    return HybridModel(features, hyperparams).fit(
        log, trust=trust, trust_normalization=trust_normalization)


def triplet_loss_and_grads(model: HybridModel, patient: int, positive: int,
                           negative: int) -> tuple[float, dict[str, np.ndarray]]:
    """Margin hinge loss for one (patient, positive, negative) triplet and its
    exact gradients with respect to every parameter array.

    The rank scale is deliberately excluded: it is piecewise constant in the
    parameters, so the analytic and finite-difference derivatives of this
    function agree wherever the hinge is active.
    """
    hp = model.hyperparams
    p, b_i = model.patient_vector(patient)
    qj, b_j = model.doctor_vector(positive)
    qd, b_d = model.doctor_vector(negative)
    raw_ij = float(p @ qj)
    raw_id = float(p @ qd)
    if hp.bias_enabled:
        raw_ij += b_i + b_j
        raw_id += b_i + b_d
    value = hp.margin - raw_ij + raw_id
    loss = max(0.0, value)

    grads = {
        "patient_emb": np.zeros_like(model.patient_emb),
        "doctor_emb": np.zeros_like(model.doctor_emb),
        "patient_bias": np.zeros_like(model.patient_bias),
        "doctor_bias": np.zeros_like(model.doctor_bias),
    }
    if value > 0:
        for f in model.features.patient_features[patient]:
            grads["patient_emb"][f] += qd - qj
        for f in model.features.doctor_features[positive]:
            grads["doctor_emb"][f] -= p
            if hp.bias_enabled:
                grads["doctor_bias"][f] -= 1.0
        for f in model.features.doctor_features[negative]:
            grads["doctor_emb"][f] += p
            if hp.bias_enabled:
                grads["doctor_bias"][f] += 1.0
    return loss, grads

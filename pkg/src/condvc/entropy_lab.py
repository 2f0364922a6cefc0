"""Exact discrete information measures and exhaustive predictor search.

This module is the repository's theoretical oracle. It verifies, by direct
enumeration over small finite alphabets, the coding inequalities the codec
design leans on: entropy-coding a signal conditioned on side information
never needs more bits than coding the difference from a predictor built
from that side information, and an optimal predictor with access to more
candidates never does worse.

Everything is a dense float64 table and every entropy is in bits. Nothing
here is approximate beyond float rounding: optimal predictors come from
exhaustive search over every function in the hypothesis class, guarded by
an explicit enumeration budget.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

PMF_SUM_TOL = 1e-12
DEFAULT_ENUMERATION_BUDGET = 10_000_000


class ValidationError(ValueError):
    """A probability table or predictor violates its invariants."""


class BudgetExceededError(RuntimeError):
    """An exhaustive search would exceed the configured enumeration budget."""


def _as_symbols(alphabet: Iterable[int], name: str) -> tuple[int, ...]:
    symbols = tuple(int(s) for s in alphabet)
    if len(symbols) < 1:
        raise ValidationError(f"{name} must contain at least one symbol")
    if len(set(symbols)) != len(symbols):
        raise ValidationError(f"{name} contains repeated symbols: {symbols}")
    return symbols


def _check_probs(probs: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    table = np.asarray(probs, dtype=np.float64)
    if table.shape != shape:
        raise ValidationError(f"probability table has shape {table.shape}, expected {shape}")
    if np.any(table < 0.0):
        raise ValidationError("probability table contains negative entries")
    total = float(table.sum())
    if abs(total - 1.0) > PMF_SUM_TOL:
        raise ValidationError(f"probability table sums to {total!r}, not 1 within {PMF_SUM_TOL}")
    table = table.copy()
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class JointPMF:
    """Dense joint distribution of two integer-valued variables.

    ``probs[i, j]`` is P(X = alphabet_x[i], Y = alphabet_y[j]). Both
    alphabets live in the same numeric domain so X - Y is well defined.
    """

    alphabet_x: tuple[int, ...]
    alphabet_y: tuple[int, ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alphabet_x", _as_symbols(self.alphabet_x, "alphabet_x"))
        object.__setattr__(self, "alphabet_y", _as_symbols(self.alphabet_y, "alphabet_y"))
        shape = (len(self.alphabet_x), len(self.alphabet_y))
        object.__setattr__(self, "probs", _check_probs(self.probs, shape))

    def marginal_x(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def marginal_y(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def swapped(self) -> "JointPMF":
        """The same distribution with the roles of X and Y exchanged."""
        return JointPMF(self.alphabet_y, self.alphabet_x, self.probs.T)


@dataclass(frozen=True)
class CandidateJointPMF:
    """Joint distribution of X and an ordered tuple of candidate variables.

    ``probs[i, j1, ..., jn]`` is P(X = alphabet_x[i], Y1 = cand[0][j1], ...).
    """

    alphabet_x: tuple[int, ...]
    candidate_alphabets: tuple[tuple[int, ...], ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alphabet_x", _as_symbols(self.alphabet_x, "alphabet_x"))
        if len(self.candidate_alphabets) < 1:
            raise ValidationError("at least one candidate alphabet is required")
        cands = tuple(
            _as_symbols(a, f"candidate_alphabets[{k}]")
            for k, a in enumerate(self.candidate_alphabets)
        )
        object.__setattr__(self, "candidate_alphabets", cands)
        shape = (len(self.alphabet_x),) + tuple(len(a) for a in cands)
        object.__setattr__(self, "probs", _check_probs(self.probs, shape))

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_alphabets)

    def domain_keys(self) -> list[tuple[int, ...]]:
        """All candidate-value tuples, in row-major (lexicographic index) order."""
        return list(itertools.product(*self.candidate_alphabets))

    def flat_probs(self) -> np.ndarray:
        """Table reshaped to (|X|, prod |Yk|), columns ordered as domain_keys()."""
        return self.probs.reshape(len(self.alphabet_x), -1)


@dataclass(frozen=True)
class Predictor:
    """A total function from side-information symbols to a finite codomain.

    Keys are plain ints for single-variable predictors and tuples of ints
    for multi-candidate predictors. Values are members of ``codomain``.
    """

    table: Mapping[object, int]
    codomain: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "codomain", _as_symbols(self.codomain, "codomain"))
        object.__setattr__(self, "table", dict(self.table))
        allowed = set(self.codomain)
        for key, value in self.table.items():
            if value not in allowed:
                raise ValidationError(f"predictor maps {key!r} to {value!r}, outside the codomain")

    def __call__(self, key):
        return self.table[key]

    @classmethod
    def identity(cls, alphabet: Sequence[int]) -> "Predictor":
        symbols = _as_symbols(alphabet, "alphabet")
        return cls({s: s for s in symbols}, symbols)

    @classmethod
    def constant(cls, alphabet: Sequence[int], value: int) -> "Predictor":
        symbols = _as_symbols(alphabet, "alphabet")
        return cls({s: value for s in symbols}, (value,))

    def check_total(self, domain: Iterable[object]) -> None:
        missing = [key for key in domain if key not in self.table]
        if missing:
            raise ValidationError(f"predictor is not total: no entry for {missing[:4]!r}")


def entropy(pmf) -> float:
    """Shannon entropy -sum p log2 p of a marginal distribution, in bits."""
    p = np.asarray(pmf, dtype=np.float64).ravel()
    p = _check_probs(p, p.shape)
    nonzero = p[p > 0.0]
    value = float(-(nonzero * np.log2(nonzero)).sum())
    return min(max(value, 0.0), np.log2(len(p)) if len(p) > 1 else 0.0)


def _entropy_unchecked(p: np.ndarray) -> float:
    nonzero = p[p > 0.0]
    if nonzero.size == 0:
        return 0.0
    return max(float(-(nonzero * np.log2(nonzero)).sum()), 0.0)


def conditional_entropy(joint: JointPMF) -> float:
    """H(X|Y) = sum_y p(y) H(X|Y=y), by brute force over the table."""
    p_y = joint.marginal_y()
    total = 0.0
    for j, py in enumerate(p_y):
        if py > 0.0:
            total += py * _entropy_unchecked(joint.probs[:, j] / py)
    return total


def residual_entropy(joint: JointPMF) -> float:
    """Entropy of R = X - Y over the induced difference alphabet."""
    diff: dict[int, float] = {}
    for i, x in enumerate(joint.alphabet_x):
        for j, y in enumerate(joint.alphabet_y):
            p = joint.probs[i, j]
            if p > 0.0:
                diff[x - y] = diff.get(x - y, 0.0) + p
    return _entropy_unchecked(np.array(list(diff.values())))


def mutual_information(joint: JointPMF) -> float:
    """I(X;Y) = H(X) - H(X|Y), nonnegative up to float rounding."""
    return _entropy_unchecked(joint.marginal_x()) - conditional_entropy(joint)


def _pushforward(flat_probs: np.ndarray, labels: np.ndarray, n_labels: int) -> np.ndarray:
    """Collapse columns of a (|X|, D) table by a label vector of length D."""
    out = np.zeros((flat_probs.shape[0], n_labels))
    for c in range(n_labels):
        mask = labels == c
        if mask.any():
            out[:, c] = flat_probs[:, mask].sum(axis=1)
    return out


def _conditional_entropy_table(table: np.ndarray) -> float:
    """H(X|Z) for an unnormalized-marginal (|X|, |Z|) joint table."""
    p_z = table.sum(axis=0)
    total = 0.0
    for j, pz in enumerate(p_z):
        if pz > 0.0:
            total += pz * _entropy_unchecked(table[:, j] / pz)
    return total


def predictor_conditional_entropy(joint: JointPMF | CandidateJointPMF, f: Predictor) -> float:
    """H(X | f(Y)) on the pushforward joint of (X, f(Y))."""
    if isinstance(joint, JointPMF):
        keys: list = list(joint.alphabet_y)
        flat = joint.probs
    else:
        keys = joint.domain_keys()
        flat = joint.flat_probs()
    f.check_total(keys)
    index = {z: c for c, z in enumerate(f.codomain)}
    labels = np.array([index[f(k)] for k in keys])
    return _conditional_entropy_table(_pushforward(flat, labels, len(f.codomain)))


def predictor_residual_entropy(joint: JointPMF | CandidateJointPMF, f: Predictor) -> float:
    """H(X - f(Y)) where the predictor's codomain lives in X's numeric domain."""
    if isinstance(joint, JointPMF):
        keys: list = list(joint.alphabet_y)
        flat = joint.probs
    else:
        keys = joint.domain_keys()
        flat = joint.flat_probs()
    f.check_total(keys)
    diff: dict[int, float] = {}
    for col, key in enumerate(keys):
        pred = f(key)
        for i, x in enumerate(joint.alphabet_x):
            p = flat[i, col]
            if p > 0.0:
                r = x - pred
                diff[r] = diff.get(r, 0.0) + p
    return _entropy_unchecked(np.array(list(diff.values())))


def conditional_entropy_all(joint: CandidateJointPMF) -> float:
    """H(X | Y1, ..., Yn): condition on the full candidate tuple."""
    return _conditional_entropy_table(joint.flat_probs())


def _resolve_codomain(codomain) -> tuple[int, ...]:
    if isinstance(codomain, int):
        if codomain < 1:
            raise ValidationError("codomain size must be >= 1")
        return tuple(range(codomain))
    return _as_symbols(codomain, "codomain")


def _search_tables(
    flat: np.ndarray, keys: list, codomain: tuple[int, ...], budget: int
) -> tuple[tuple[int, ...], float, int]:
    """Exhaustively minimize H(X|f) over all label tables, lexicographic order.

    Returns (best label tuple, best entropy, number of tables). Ties keep the
    first (lexicographically smallest) table because the comparison is strict.
    """
    domain_size = len(keys)
    n_labels = len(codomain)
    count = n_labels**domain_size
    if count > budget:
        raise BudgetExceededError(
            f"exhaustive predictor search requires {count} table evaluations, "
            f"which exceeds the budget of {budget}"
        )
    best_labels = None
    best_h = np.inf
    for labels in itertools.product(range(n_labels), repeat=domain_size):
        h = _conditional_entropy_table(_pushforward(flat, np.array(labels), n_labels))
        if h < best_h:
            best_h = h
            best_labels = labels
    return best_labels, best_h, count


def optimal_predictor(
    joint: JointPMF | CandidateJointPMF,
    codomain,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> tuple[Predictor, float]:
    """The f minimizing H(X | f(Y...)) by exhaustive enumeration.

    ``codomain`` is either an explicit tuple of output symbols or an int k,
    meaning the abstract labels 0..k-1. Ties break to the lexicographically
    smallest predictor table so results are reproducible.
    """
    codomain_t = _resolve_codomain(codomain)
    if isinstance(joint, JointPMF):
        keys: list = list(joint.alphabet_y)
        flat = joint.probs
    else:
        keys = joint.domain_keys()
        flat = joint.flat_probs()
    labels, best_h, _ = _search_tables(flat, keys, codomain_t, budget)
    table = {key: codomain_t[labels[i]] for i, key in enumerate(keys)}
    return Predictor(table, codomain_t), best_h


def optimal_predictor_over_subset(
    joint: CandidateJointPMF,
    candidate_indices: Sequence[int],
    codomain,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> tuple[Predictor, float]:
    """Optimal predictor restricted to a subset of candidates.

    The restricted predictor is embedded into the full candidate domain and
    evaluated on the full table, so comparisons against the unrestricted
    optimum are exact: both sides go through the identical pushforward code.
    """
    indices = tuple(candidate_indices)
    if not indices or any(i < 0 or i >= joint.n_candidates for i in indices):
        raise ValidationError(f"candidate indices {indices} out of range")
    codomain_t = _resolve_codomain(codomain)
    keys = joint.domain_keys()
    flat = joint.flat_probs()
    sub_keys = sorted({tuple(key[i] for i in indices) for key in keys})
    count = len(codomain_t) ** len(sub_keys)
    if count > budget:
        raise BudgetExceededError(
            f"exhaustive predictor search requires {count} table evaluations, "
            f"which exceeds the budget of {budget}"
        )
    best_table = None
    best_h = np.inf
    sub_index = {k: i for i, k in enumerate(sub_keys)}
    key_to_sub = np.array([sub_index[tuple(key[i] for i in indices)] for key in keys])
    for sub_labels in itertools.product(range(len(codomain_t)), repeat=len(sub_keys)):
        labels = np.array(sub_labels)[key_to_sub]
        h = _conditional_entropy_table(_pushforward(flat, labels, len(codomain_t)))
        if h < best_h:
            best_h = h
            best_table = {key: codomain_t[labels[i]] for i, key in enumerate(keys)}
    return Predictor(best_table, codomain_t), best_h


# ---------------------------------------------------------------------------
# Randomized inequality experiments (used by tests and the CLI lab command)
# ---------------------------------------------------------------------------


def sample_joint(rng: np.random.Generator, n_x: int, n_y: int) -> JointPMF:
    """A random joint PMF from a flat Dirichlet over all table cells."""
    probs = rng.dirichlet(np.ones(n_x * n_y)).reshape(n_x, n_y)
    return JointPMF(tuple(range(n_x)), tuple(range(n_y)), probs)


def sample_candidate_joint(
    rng: np.random.Generator, n_x: int, candidate_sizes: Sequence[int]
) -> CandidateJointPMF:
    sizes = tuple(int(s) for s in candidate_sizes)
    probs = rng.dirichlet(np.ones(n_x * int(np.prod(sizes)))).reshape((n_x,) + sizes)
    return CandidateJointPMF(
        tuple(range(n_x)), tuple(tuple(range(s)) for s in sizes), probs
    )


def sample_predictor(rng: np.random.Generator, domain: Sequence, codomain) -> Predictor:
    codomain_t = _resolve_codomain(codomain)
    table = {key: codomain_t[rng.integers(len(codomain_t))] for key in domain}
    return Predictor(table, codomain_t)


@dataclass
class InequalityRecord:
    """Measured slack of each inequality on one random joint (bits)."""

    trial: int
    n_x: int
    n_y: int
    conditional_bits: float
    residual_bits: float
    residual_margin: float       # H(X-Y) - H(X|Y), must be >= -tol
    predictor_margin: float      # min over sampled f of H(X|f(Y)) - H(X|Y)
    mutual_information: float
    mi_symmetry_gap: float

    def violates(self, tol: float) -> bool:
        return (
            self.residual_margin < -tol
            or self.predictor_margin < -tol
            or self.mutual_information < -1e-12
            or abs(self.mi_symmetry_gap) > 1e-12
        )


@dataclass
class ChainRecord:
    """Exhaustive verification of the predictor-chain inequalities on one instance."""

    trial: int
    h_given_all: float           # H(X | Y1..Yn)
    h_optimal: float             # H(X | f*(Y1..Yn))
    h_optimal_subset: float      # H(X | f*(Y1)) via embedded search
    worst_f_gap: float           # min over f of H(X|f) - h_optimal (>= 0 exactly)
    worst_residual_gap: float    # min over f of H(X - f) - H(X | f)
    n_predictors: int

    @property
    def chain_ok(self) -> bool:
        return (
            self.h_given_all <= self.h_optimal + 1e-12
            and self.worst_f_gap >= 0.0
            and self.worst_residual_gap >= -1e-12
        )

    @property
    def monotone_ok(self) -> bool:
        # Exact: the subset optimum is one of the tables the full search saw.
        return self.h_optimal <= self.h_optimal_subset


@dataclass
class LabReport:
    seed: int
    tolerance: float
    records: list[InequalityRecord] = field(default_factory=list)
    chain_records: list[ChainRecord] = field(default_factory=list)

    @property
    def violations(self) -> int:
        count = sum(1 for r in self.records if r.violates(self.tolerance))
        count += sum(1 for c in self.chain_records if not (c.chain_ok and c.monotone_ok))
        return count


def run_inequality_trials(
    trials: int,
    max_alphabet: int = 8,
    seed: int = 0,
    predictors_per_joint: int = 3,
    tolerance: float = 1e-9,
) -> LabReport:
    """Sample random joints and measure the slack of every inequality."""
    rng = np.random.default_rng(seed)
    report = LabReport(seed=seed, tolerance=tolerance)
    for trial in range(trials):
        n_x = int(rng.integers(2, max_alphabet + 1))
        n_y = int(rng.integers(2, max_alphabet + 1))
        joint = sample_joint(rng, n_x, n_y)
        h_cond = conditional_entropy(joint)
        h_resid = residual_entropy(joint)
        pred_margin = np.inf
        for _ in range(predictors_per_joint):
            codomain = int(rng.integers(1, n_y + 1))
            f = sample_predictor(rng, joint.alphabet_y, codomain)
            pred_margin = min(pred_margin, predictor_conditional_entropy(joint, f) - h_cond)
        mi = mutual_information(joint)
        mi_swapped = mutual_information(joint.swapped())
        report.records.append(
            InequalityRecord(
                trial=trial,
                n_x=n_x,
                n_y=n_y,
                conditional_bits=h_cond,
                residual_bits=h_resid,
                residual_margin=h_resid - h_cond,
                predictor_margin=float(pred_margin),
                mutual_information=mi,
                mi_symmetry_gap=mi - mi_swapped,
            )
        )
    return report


def run_chain_trials(
    trials: int,
    seed: int = 0,
    max_x: int = 3,
    max_candidate: int = 3,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> LabReport:
    """Exhaustive two-candidate chain and monotonicity checks on random joints.

    Every enumerable predictor f over (Y1, Y2) with codomain = alphabet of X
    is checked against the full chain; the one-candidate optimum is evaluated
    through the same embedded search so the monotonicity comparison is exact.
    """
    rng = np.random.default_rng(seed)
    report = LabReport(seed=seed, tolerance=0.0)
    for trial in range(trials):
        n_x = int(rng.integers(2, max_x + 1))
        sizes = (int(rng.integers(2, max_candidate + 1)), int(rng.integers(2, max_candidate + 1)))
        joint = sample_candidate_joint(rng, n_x, sizes)
        codomain = joint.alphabet_x
        h_all = conditional_entropy_all(joint)
        f_star, h_star = optimal_predictor(joint, codomain, budget=budget)
        _, h_star_sub = optimal_predictor_over_subset(joint, (0,), codomain, budget=budget)

        keys = joint.domain_keys()
        worst_f_gap = np.inf
        worst_residual_gap = np.inf
        n_predictors = 0
        for labels in itertools.product(range(len(codomain)), repeat=len(keys)):
            f = Predictor({k: codomain[labels[i]] for i, k in enumerate(keys)}, codomain)
            h_f = predictor_conditional_entropy(joint, f)
            h_r = predictor_residual_entropy(joint, f)
            worst_f_gap = min(worst_f_gap, h_f - h_star)
            worst_residual_gap = min(worst_residual_gap, h_r - h_f)
            n_predictors += 1

        report.chain_records.append(
            ChainRecord(
                trial=trial,
                h_given_all=h_all,
                h_optimal=h_star,
                h_optimal_subset=h_star_sub,
                worst_f_gap=float(worst_f_gap),
                worst_residual_gap=float(worst_residual_gap),
                n_predictors=n_predictors,
            )
        )
    return report

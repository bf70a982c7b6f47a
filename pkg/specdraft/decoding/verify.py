"""
Draft verification. The stochastic rule accepts each drafted token with probability
``min(1, q(x) / d(x))`` and, at the first rejection, resamples from ``norm(max(0, q - d))``;
the emitted tokens are then distributed exactly as the target's own samples would be.
"""
from typing import Callable, List, NamedTuple, Optional, Protocol, Sequence, Union

import numpy as np

from specdraft.errors import ContractViolation
from specdraft.models.sampling import greedy_token, sample_categorical, validate_dist

AcceptRule = Callable[[np.ndarray, np.ndarray, int], float]
ResidualRule = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Draws(Protocol):
    """Source of the verifier's random choices."""

    def bernoulli(self, p: float) -> bool:
        ...

    def categorical(self, probs: np.ndarray) -> int:
        ...


class RngDraws:
    """Each choice consumes exactly one uniform from ``rng``."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def bernoulli(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def categorical(self, probs: np.ndarray) -> int:
        return sample_categorical(probs, self.rng)


def _as_draws(rng: Union[np.random.Generator, Draws]) -> Draws:
    return RngDraws(rng) if isinstance(rng, np.random.Generator) else rng


class VerifyOutcome(NamedTuple):
    accepted_count: int
    emitted_tokens: List[int]
    rejection_index: Optional[int]
    bonus: bool
    accepted_mask: List[bool]


def acceptance_probability(q: np.ndarray, d: np.ndarray, token: int) -> float:
    if d[token] <= 0:
        raise ContractViolation(f"drafted token {token} has zero draft probability")
    return float(min(1.0, q[token] / d[token]))


def residual_distribution(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    residual = np.maximum(q.astype(np.float64) - d.astype(np.float64), 0.0)
    total = residual.sum()
    # A rejection with positive probability implies q != d somewhere, hence total > 0.
    if not total > 0:
        raise ContractViolation("residual distribution is all zero although a rejection occurred")
    return residual / total


def _check_lengths(q_dists: Sequence[np.ndarray], draft_tokens: Sequence[int], d_dists=None) -> None:
    t = len(draft_tokens)
    if len(q_dists) != t + 1:
        raise ContractViolation(f"{len(q_dists)} target distributions for {t} drafted tokens (need {t + 1})")
    if d_dists is not None and len(d_dists) != t:
        raise ContractViolation(f"{len(d_dists)} draft distributions for {t} drafted tokens")


def verify_stochastic(
    q_dists: Sequence[np.ndarray],
    d_dists: Sequence[np.ndarray],
    draft_tokens: Sequence[int],
    rng: Union[np.random.Generator, Draws],
    accept_rule: AcceptRule = acceptance_probability,
    residual_rule: ResidualRule = residual_distribution,
) -> VerifyOutcome:
    """
    One choice per evaluated position, in position order, then one more for the correction or
    bonus token. A generator ``rng`` is consumed one uniform per choice.
    """
    _check_lengths(q_dists, draft_tokens, d_dists)
    for dist in (*q_dists, *d_dists):
        validate_dist(dist)
    draws = _as_draws(rng)
    accepted: List[int] = []
    mask: List[bool] = []
    for i, token in enumerate(draft_tokens):
        token = int(token)
        if d_dists[i][token] <= 0:
            raise ContractViolation(f"position {i + 1}: drafted token {token} has zero draft probability")
        if draws.bernoulli(accept_rule(q_dists[i], d_dists[i], token)):
            accepted.append(token)
            mask.append(True)
            continue
        mask.append(False)
        correction = draws.categorical(residual_rule(q_dists[i], d_dists[i]))
        return VerifyOutcome(len(accepted), accepted + [correction], i + 1, False, mask)
    bonus = draws.categorical(np.asarray(q_dists[-1], dtype=np.float64))
    return VerifyOutcome(len(accepted), accepted + [bonus], None, True, mask)


def verify_greedy(q_dists: Sequence[np.ndarray], draft_tokens: Sequence[int]) -> VerifyOutcome:
    _check_lengths(q_dists, draft_tokens)
    accepted: List[int] = []
    mask: List[bool] = []
    for i, token in enumerate(draft_tokens):
        expected = greedy_token(q_dists[i])
        if int(token) != expected:
            mask.append(False)
            return VerifyOutcome(len(accepted), accepted + [expected], i + 1, False, mask)
        accepted.append(expected)
        mask.append(True)
    return VerifyOutcome(len(accepted), accepted + [greedy_token(q_dists[-1])], None, True, mask)


Verifier = Callable[..., VerifyOutcome]


class PathDraws:
    """
    Replays one path through a tree of random choices. Choice ``n`` takes option ``path[n]`` among
    the options of positive probability; ``weight`` is the probability of the path so far.
    """

    def __init__(self, path: List[int]) -> None:
        self.path = path
        self.widths: List[int] = []
        self.weight = 1.0

    def _choose(self, probs: np.ndarray) -> int:
        options = np.flatnonzero(probs > 0)
        n = len(self.widths)
        if n == len(self.path):
            self.path.append(0)
        self.widths.append(len(options))
        pick = int(options[self.path[n]])
        self.weight *= float(probs[pick])
        return pick

    def bernoulli(self, p: float) -> bool:
        p = min(max(float(p), 0.0), 1.0)
        return self._choose(np.array([p, 1.0 - p])) == 0

    def categorical(self, probs: np.ndarray) -> int:
        probs = np.asarray(probs, dtype=np.float64)
        return self._choose(probs / probs.sum())

    def next_path(self) -> Optional[List[int]]:
        for n in range(len(self.widths) - 1, -1, -1):
            if self.path[n] + 1 < self.widths[n]:
                return self.path[:n] + [self.path[n] + 1]
        return None


class EmittedMarginals(NamedTuple):
    marginals: List[np.ndarray]
    reach: List[float]
    total: float


def enumerate_emitted_marginals(
    q_dists: Sequence[np.ndarray],
    d_dists: Sequence[np.ndarray],
    accept_rule: AcceptRule = acceptance_probability,
    residual_rule: ResidualRule = residual_distribution,
    verifier: Optional[Verifier] = None,
) -> EmittedMarginals:
    """
    Runs ``verifier`` (``verify_stochastic`` by default) along every path of its random choices,
    with each drafted token ``x_i ~ d_i``. For output position ``n`` returns the distribution of the
    emitted token given that position ``n`` is emitted, and the probability of reaching it.
    """
    verifier = verifier or verify_stochastic
    t = len(d_dists)
    if len(q_dists) != t + 1:
        raise ContractViolation(f"{len(q_dists)} target distributions for {t} draft distributions")
    vocab = len(q_dists[0])
    mass = [np.zeros(vocab, dtype=np.float64) for _ in range(t + 1)]
    total = 0.0
    path: Optional[List[int]] = []
    while path is not None:
        draws = PathDraws(path)
        drafts = [draws.categorical(d) for d in d_dists]
        outcome = verifier(q_dists, d_dists, drafts, draws, accept_rule, residual_rule)
        total += draws.weight
        for n, token in enumerate(outcome.emitted_tokens):
            mass[n][token] += draws.weight
        path = draws.next_path()
    reach = [float(m.sum()) for m in mass]
    marginals = [m / r if r > 0 else m for m, r in zip(mass, reach)]
    return EmittedMarginals(marginals, reach, total)

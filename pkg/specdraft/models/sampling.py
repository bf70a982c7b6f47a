import numpy as np

from specdraft.errors import DomainError

PROB_TOLERANCE = 1e-6


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def validate_dist(dist: np.ndarray, tolerance: float = PROB_TOLERANCE) -> np.ndarray:
    """
    Checks that ``dist`` is a probability vector: finite, non-negative, summing to 1 within ``tolerance``.
    """
    dist = np.asarray(dist)
    if dist.ndim != 1 or dist.size == 0:
        raise DomainError(f"probability distribution must be a non-empty vector, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise DomainError("probability distribution has negative or non-finite entries")
    total = float(dist.sum(dtype=np.float64))
    if abs(total - 1.0) > tolerance:
        raise DomainError(f"probability distribution sums to {total}, not 1")
    return dist


def apply_temperature(dist: np.ndarray, temperature: float) -> np.ndarray:
    """
    ``softmax(log(dist) / temperature)``; temperatures 0 and 1 return ``dist`` unchanged.
    """
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    if temperature in (0, 1):
        return dist
    with np.errstate(divide="ignore"):
        scaled = np.log(dist.astype(np.float64)) / temperature
    return softmax_rows(scaled).astype(dist.dtype)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """
    Inverse-CDF draw using exactly one uniform variate from ``rng``.
    """
    cdf = np.cumsum(probs, dtype=np.float64)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


def greedy_token(dist: np.ndarray) -> int:
    # np.argmax returns the lowest index among ties
    return int(np.argmax(dist))


def sample_token(dist: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    validate_dist(dist)
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return greedy_token(dist)
    return sample_categorical(apply_temperature(dist, temperature), rng)


def draw(dist: np.ndarray, temperature: float, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """
    Tempers ``dist`` and picks a token from it. Returns the token and the distribution it was drawn
    from, which is what verification must compare against.
    """
    validate_dist(dist)
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return greedy_token(dist), dist
    used = apply_temperature(dist, temperature)
    return sample_categorical(used, rng), used

from typing import Callable, Iterable, List, Optional, Sequence, TypeVar
from fractions import Fraction
import concurrent.futures
import hashlib

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Apply fn to every item, optionally on a thread pool.

    Results come back in input order whatever the thread count, so callers that
    write into preallocated slots get identical output serially and in parallel.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results: List[Optional[R]] = [None] * len(items)
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(threads, len(items))) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results  # type: ignore[return-value]


def exact(value) -> Fraction:
    """Exact rational of a user-facing decimal, e.g. 0.1 -> 1/10 rather than the binary float."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(repr(float(value)))


def round_half_up(value: Fraction) -> int:
    """
    Round a non-negative rational to the nearest integer, halves going up.

    Examples:
    >>> round_half_up(Fraction(7, 2))
    4
    >>> round_half_up(Fraction(5, 2))
    3
    """
    return int(value + Fraction(1, 2))


def split_counts(total: int, ratios: Sequence[float]) -> List[int]:
    """
    Split total into len(ratios) integer counts by cumulative round-half-up.

    The counts always sum to total.

    Examples:
    >>> split_counts(10, [0.2, 0.6, 0.2])
    [2, 6, 2]
    >>> split_counts(7, [0.0, 1.0, 0.0])
    [0, 7, 0]
    """
    bounds = [0]
    cumulative = Fraction(0)
    for r in ratios[:-1]:
        cumulative += exact(r)
        bounds.append(min(total, round_half_up(cumulative * total)))
    bounds.append(total)
    return [bounds[i + 1] - bounds[i] for i in range(len(ratios))]


def parse_float_list(value: str, expected: Optional[int] = None) -> List[float]:
    """
    Parse a comma-separated list of floats.

    :param value: e.g. "0.2,0.6,0.2"
    :param expected: required item count, if any
    :raises ValueError: unparsable item or wrong count
    """
    items = [v.strip() for v in value.split(",") if v.strip()]
    try:
        parsed = [float(v) for v in items]
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got '{value}'")
    if expected is not None and len(parsed) != expected:
        raise ValueError(f"expected {expected} comma-separated values, got {len(parsed)} in '{value}'")
    return parsed


def parse_int_list(value: str, expected: Optional[int] = None) -> List[int]:
    parsed = parse_float_list(value, expected)
    if any(p != int(p) for p in parsed):
        raise ValueError(f"expected comma-separated integers, got '{value}'")
    return [int(p) for p in parsed]


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_percent(probability: float, digits: int = 2) -> str:
    """
    Format a probability as a percentage string.

    Examples:
    - 0.535714 -> "53.57%"
    - 1.0 -> "100.00%"
    """
    return f"{probability * 100:.{digits}f}%"

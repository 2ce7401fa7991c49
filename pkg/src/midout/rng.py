"""Counter-based splitmix64 random stream.

Draw ``i`` (0-based) of a stream with seed ``s`` is ``mix(s + (i + 1) * GOLDEN)``
where ``mix`` is the splitmix64 finalizer; uniforms take the top 53 bits of that
word scaled by ``2**-53``. Everything is done in explicit 64-bit unsigned
arithmetic so a stream is reproducible bit-for-bit in any language.

Derived draws:

* normal: Box-Muller on two consecutive uniforms ``u1, u2``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
* integer in ``[0, n)``: ``floor(u * n)``.
* categorical: inverse CDF on one uniform.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Deterministic random stream; ``counter`` is the number of words consumed."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def spawn(self, tag: int) -> "RngStream":
        """Independent child stream, keyed by ``tag``, that does not advance this one."""
        child_seed = int(_mix(np.array([(self.seed ^ (int(tag) * GOLDEN)) & _MASK], dtype=np.uint64))[0])
        return RngStream(child_seed)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
            return _mix(state)

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got lo={lo}, hi={hi}")
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        out = lo + (hi - lo) * u
        # lo + (hi-lo)*u can round up to hi for u just below 1
        return np.where(out >= hi, np.nextafter(hi, lo), out)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self.uniform_array(1, lo, hi)[0])

    def normal_array(self, n: int, std: float = 1.0) -> np.ndarray:
        u = self.uniform_array(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return std * np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, n: int) -> int:
        """Integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError(f"randint needs n > 0, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def randint_array(self, size: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform_array(size) * n).astype(np.int64), n - 1)

    def categorical(self, probs: np.ndarray) -> int:
        cdf = np.cumsum(probs)
        u = self.uniform() * cdf[-1]
        return min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)

    def categorical_rows(self, probs: np.ndarray) -> np.ndarray:
        """One categorical draw per row of a 2-D probability matrix."""
        cdf = np.cumsum(probs, axis=1)
        u = self.uniform_array(probs.shape[0]) * cdf[:, -1]
        idx = (cdf <= u[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform_array(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

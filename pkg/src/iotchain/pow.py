"""Primitive-root proof of work.

The gateway gives every miner of an event a distinct primitive root ``r`` of
one prime ``P`` together with a lower bound on the exponent. A solution is an
exponent ``K`` above the bound with ``r**K % P == r``; by Fermat's little
theorem any ``K = c*(P-1) + 1`` works, and because every primitive root has
order ``P-1`` the same ``K`` checks out under every other assigned root.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

K_LIMIT = 1 << 16


class PowError(ValueError):
    pass


class NotPrime(PowError):
    pass


class NotEnoughRoots(PowError):
    pass


class PrimeTooLarge(PowError):
    pass


class SolutionOverflow(PowError):
    pass


@lru_cache(maxsize=4096)
def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def nth_prime(n: int) -> int:
    """1-based: ``nth_prime(1) == 2``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    count, candidate = 0, 1
    while count < n:
        candidate += 1
        if is_prime(candidate):
            count += 1
    return candidate


def primes_between_ordinals(lo: int, hi: int) -> list[int]:
    """All primes whose 1-based ordinal lies in ``lo..hi`` inclusive."""
    out, count, candidate = [], 0, 1
    while count < hi:
        candidate += 1
        if is_prime(candidate):
            count += 1
            if count >= lo:
                out.append(candidate)
    return out


def prime_factors(n: int) -> list[int]:
    """Distinct prime factors by trial division, ascending."""
    factors = []
    f = 2
    while f * f <= n:
        if n % f == 0:
            factors.append(f)
            while n % f == 0:
                n //= f
        f += 1 if f == 2 else 2
    if n > 1:
        factors.append(n)
    return factors


def euler_phi(n: int) -> int:
    if n < 1:
        raise ValueError("euler_phi needs n >= 1")
    result = n
    for p in prime_factors(n):
        result -= result // p
    return result


def modpow(base: int, exp: int, mod: int) -> tuple[int, int]:
    """Left-to-right square-and-multiply. Returns ``(value, multiplications)``."""
    if mod == 1:
        return 0, 0
    result, mults = 1, 0
    base %= mod
    for bit in bin(exp)[2:] if exp else "":
        if mults or result != 1:
            result = result * result % mod
            mults += 1
        if bit == "1":
            result = result * base % mod
            mults += 1
    return result, mults


def _require_prime(p: int):
    if not is_prime(p):
        raise NotPrime(f"{p} is not prime")


def is_primitive_root(r: int, p: int) -> bool:
    if not 1 < r < p:
        return False
    return all(pow(r, (p - 1) // q, p) != 1 for q in prime_factors(p - 1))


@lru_cache(maxsize=256)
def _roots(p: int) -> tuple[int, ...]:
    exps = [(p - 1) // q for q in prime_factors(p - 1)]
    return tuple(r for r in range(2, p) if all(pow(r, e, p) != 1 for e in exps))


def primitive_roots(p: int) -> list[int]:
    _require_prime(p)
    return list(_roots(p))


@dataclass(frozen=True)
class PuzzleChallenge:
    prime: int
    root: int
    threshold: int
    event: int


@dataclass(frozen=True)
class PuzzleSolution:
    k: int
    modmults: int = 0

    def to_bytes(self) -> bytes:
        return self.k.to_bytes(2, "big")


def assign_roots(p: int, miners: Sequence[int], rng: random.Random) -> dict[int, int]:
    """Give each miner a distinct primitive root of ``p``."""
    _require_prime(p)
    if 2 * (p - 1) + 1 >= K_LIMIT:
        raise PrimeTooLarge(f"smallest solution for P={p} does not fit in 16 bits")
    roots = _roots(p)
    miners = sorted(miners)
    if len(miners) > len(roots):
        raise NotEnoughRoots(f"P={p} has {len(roots)} primitive roots, {len(miners)} miners")
    return dict(zip(miners, rng.sample(roots, len(miners))))


def draw_threshold(p: int, roots: Iterable[int], rng: random.Random,
                   max_factor: Optional[int] = None) -> int:
    """``P * u`` with ``u`` uniform on ``1..min(roots)``, optionally capped."""
    top = min(roots)
    if max_factor is not None:
        top = max(1, min(top, max_factor))
    return p * rng.randint(1, top)


def make_challenges(p: int, event: int, miners: Sequence[int], rng: random.Random,
                    max_factor: Optional[int] = None) -> dict[int, PuzzleChallenge]:
    assigned = assign_roots(p, miners, rng)
    if not assigned:
        return {}
    threshold = draw_threshold(p, assigned.values(), rng, max_factor)
    return {m: PuzzleChallenge(p, r, threshold, event) for m, r in assigned.items()}


def smallest_exponent(prime: int, threshold: int) -> int:
    """Least ``k > threshold`` with ``k % (prime - 1) == 1``."""
    c = max(threshold - 1, 0) // (prime - 1) + 1
    return c * (prime - 1) + 1


def solve_puzzle(c: PuzzleChallenge) -> PuzzleSolution:
    k = smallest_exponent(c.prime, c.threshold)
    if k >= K_LIMIT:
        raise SolutionOverflow(f"K={k} for P={c.prime} does not fit in 16 bits")
    value, mults = modpow(c.root, k, c.prime)
    assert value == c.root
    return PuzzleSolution(k, mults)


def check_solution(p: int, root: int, threshold: int, k: int) -> tuple[bool, int]:
    """Like ``verify_solution`` but also returns the multiplications spent."""
    _require_prime(p)
    if not 1 < root < p or k <= threshold:
        return False, 0
    value, mults = modpow(root, k, p)
    return value == root, mults


def verify_solution(p: int, root: int, threshold: int, k: int) -> bool:
    return check_solution(p, root, threshold, k)[0]


# Rows of the published timing table: (ordinal, printed prime, printed root
# count, printed chosen root, printed K).
PUBLISHED_TABLE = (
    (100, 541, 144, 360, 1081),
    (200, 1223, 552, 926, 2445),
    (400, 2741, 1088, 2520, 5481),
    (600, 4409, 2016, 2921, 8817),
    (800, 6133, 1728, 5264, 12265),
    (1000, 7991, 3816, 3926, 15837),
)


@dataclass(frozen=True)
class TableRow:
    ordinal: int
    printed_prime: int
    prime: int
    roots: int
    printed_roots: int
    chosen_root: int
    chosen_is_root: bool
    k: int
    printed_k: int

    @property
    def ok(self) -> bool:
        return self.roots == self.printed_roots and self.k == self.printed_k

    @property
    def typo(self) -> bool:
        return self.prime != self.printed_prime


def recompute_table() -> list[TableRow]:
    """Recompute the table from the ordinals; the prime actually used is the
    true ``n``-th prime, which exposes misprinted entries."""
    rows = []
    for ordinal, printed_p, printed_roots, chosen, printed_k in PUBLISHED_TABLE:
        p = nth_prime(ordinal)
        roots = len(primitive_roots(p))
        k = solve_puzzle(PuzzleChallenge(p, _roots(p)[0], p, 0)).k
        rows.append(TableRow(ordinal, printed_p, p, roots, printed_roots, chosen,
                             is_primitive_root(chosen, p), k, printed_k))
    return rows

import random

import pytest
from hypothesis import given, settings, strategies as st

from iotchain.pow import (K_LIMIT, NotEnoughRoots, NotPrime, PrimeTooLarge, PuzzleChallenge,
                          SolutionOverflow, assign_roots, check_solution, draw_threshold,
                          euler_phi, is_prime, is_primitive_root, make_challenges, modpow,
                          nth_prime, prime_factors, primes_between_ordinals, primitive_roots,
                          recompute_table, solve_puzzle, verify_solution)
from oracles import brute_nth_prime, brute_phi, brute_primitive_roots, smallest_k

SMALL_PRIMES = [p for p in range(3, 400) if is_prime(p)]


def test_euler_phi_examples():
    assert euler_phi(1) == 1
    assert euler_phi(541) == 540
    assert euler_phi(540) == 144


@given(st.integers(1, 3000))
def test_euler_phi_matches_gcd_count(n):
    assert euler_phi(n) == brute_phi(n)


def test_primitive_roots_small():
    assert primitive_roots(5) == brute_primitive_roots(5) == [2, 3]
    assert primitive_roots(7) == brute_primitive_roots(7) == [3, 5]
    assert len(primitive_roots(1223)) == 552
    with pytest.raises(NotPrime):
        primitive_roots(9)


@pytest.mark.parametrize("p", SMALL_PRIMES)
def test_primitive_roots_match_order_oracle(p):
    roots = primitive_roots(p)
    assert roots == brute_primitive_roots(p)
    assert len(roots) == euler_phi(euler_phi(p))


def test_nth_prime_and_ordinal_range():
    for n in (1, 2, 100, 200, 1000):
        assert nth_prime(n) == brute_nth_prime(n)
    assert nth_prime(1000) == 7919
    pool = primes_between_ordinals(800, 1200)
    assert pool[0] == nth_prime(800) == 6133
    assert pool[-1] == nth_prime(1200) == 9733
    assert len(pool) == 401


def test_seven_nine_nine_one_is_composite():
    assert not is_prime(7991)
    assert prime_factors(7991) == [61, 131]
    assert euler_phi(euler_phi(7919)) == 3816


def test_modpow_counts_multiplications():
    for base, exp, mod in [(3, 13, 7), (360, 1081, 541), (2, 0, 11), (5, 1, 7)]:
        value, mults = modpow(base, exp, mod)
        assert value == pow(base, exp, mod)
        assert mults <= 2 * max(exp.bit_length(), 1)


def test_solve_examples():
    assert solve_puzzle(PuzzleChallenge(541, 360, 541, 1)).k == 1081
    assert solve_puzzle(PuzzleChallenge(1223, 926, 1223, 1)).k == 2445
    assert solve_puzzle(PuzzleChallenge(7, 3, 7, 1)).k == smallest_k(7, 7) == 13


def test_solution_overflow():
    with pytest.raises(SolutionOverflow):
        solve_puzzle(PuzzleChallenge(6133, 2, 6133 * 20, 1))


def test_verify_examples():
    assert verify_solution(7, 5, 7, 13)
    assert not verify_solution(541, 360, 541, 1080)
    assert not verify_solution(541, 360, 541, 1)
    with pytest.raises(NotPrime):
        verify_solution(8, 3, 8, 15)


def test_make_challenges():
    rng = random.Random(4)
    cs = make_challenges(541, 0x2A, [1, 2, 3], rng)
    roots = [c.root for c in cs.values()]
    assert len(set(roots)) == 3 and all(r in primitive_roots(541) for r in roots)
    assert len({c.threshold for c in cs.values()}) == 1
    assert make_challenges(541, 0x2A, [1, 2, 3], random.Random(4)) == cs
    with pytest.raises(NotEnoughRoots):
        make_challenges(5, 1, [1, 2, 3], random.Random(0))
    with pytest.raises(PrimeTooLarge):
        assign_roots(nth_prime(4000), [1], random.Random(0))


@settings(max_examples=60)
@given(st.sampled_from(SMALL_PRIMES[3:]), st.integers(0, 2**32))
def test_threshold_bounds(p, seed):
    rng = random.Random(seed)
    roots = rng.sample(primitive_roots(p), 2)
    t = draw_threshold(p, roots, rng)
    assert p <= t <= p * min(roots) and t % p == 0
    assert draw_threshold(p, roots, rng, max_factor=1) == p


@settings(max_examples=80)
@given(st.sampled_from(SMALL_PRIMES[5:]), st.integers(0, 2**32))
def test_cross_root_verification(p, seed):
    rng = random.Random(seed)
    cs = make_challenges(p, 1, [1, 2, 3], rng)
    for c in cs.values():
        if smallest_k(p, c.threshold) >= K_LIMIT:
            with pytest.raises(SolutionOverflow):
                solve_puzzle(c)
            continue
        sol = solve_puzzle(c)
        assert (sol.k - 1) % (p - 1) == 0 and sol.k > c.threshold
        assert sol.k == smallest_k(p, c.threshold)
        for other in cs.values():
            assert verify_solution(p, other.root, other.threshold, sol.k)


@settings(max_examples=80)
@given(st.sampled_from(SMALL_PRIMES[2:]), st.integers(2, 5000))
def test_non_fermat_exponents_fail(p, k):
    if (k - 1) % (p - 1) == 0:
        return
    for r in primitive_roots(p)[:4]:
        assert not verify_solution(p, r, 0, k)
        assert not check_solution(p, r, 0, k)[0]


def test_table_regression():
    rows = recompute_table()
    assert [r.prime for r in rows] == [541, 1223, 2741, 4409, 6133, 7919]
    assert [r.roots for r in rows] == [144, 552, 1088, 2016, 1728, 3816]
    assert [r.k for r in rows] == [1081, 2445, 5481, 8817, 12265, 15837]
    assert all(r.chosen_is_root for r in rows)
    assert [r.typo for r in rows] == [False] * 5 + [True]
    for r in rows:
        assert is_primitive_root(r.chosen_root, r.prime)

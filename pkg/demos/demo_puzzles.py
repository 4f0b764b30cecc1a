"""
Puzzles built on primitive roots
================================

Every miner verifying an event holds a different primitive root of the
event's prime, yet all of them accept the same solution. The reason is
Fermat: ``r**k == r (mod p)`` holds for every root exactly when
``k == 1 (mod p - 1)``.
"""

import random

from iotchain.pow import make_challenges, recompute_table, solve_puzzle, verify_solution

# The reference table: root counts and the smallest solution for threshold P.
for row in recompute_table():
    note = f"  (printed as {row.printed_prime})" if row.typo else ""
    print(f"P={row.prime:>5}  roots={row.roots:>5}  K={row.k:>6}{note}")

# Three miners, three roots, one threshold.
challenges = make_challenges(1223, 0x2A, [1, 2, 3], random.Random(7), max_factor=1)
k = solve_puzzle(challenges[1]).k
print("\nminer 1 solves K =", k)
for miner, c in challenges.items():
    print(f"  miner {miner} (root {c.root:>4}) accepts: {verify_solution(c.prime, c.root, c.threshold, k)}")

# One less and every root refuses it.
print("K - 1 accepted by anyone:",
      any(verify_solution(c.prime, c.root, c.threshold, k - 1) for c in challenges.values()))

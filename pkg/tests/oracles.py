"""Independent reference computations used to cross-check the package.

Nothing here imports the code under test except plain data types, so a bug
in the implementation cannot leak into the expected values.
"""

from __future__ import annotations

import itertools
from collections import defaultdict


def xor_fold(data) -> int:
    out = 0
    for b in data:
        out ^= b
    return out


def multiplicative_order(r: int, p: int) -> int:
    x, k = r % p, 1
    while x != 1:
        x = x * r % p
        k += 1
        if k > p:
            return 0
    return k


def brute_primitive_roots(p: int) -> list[int]:
    return [r for r in range(2, p) if multiplicative_order(r, p) == p - 1]


def brute_phi(n: int) -> int:
    from math import gcd
    return sum(1 for k in range(1, n + 1) if gcd(k, n) == 1)


def brute_nth_prime(n: int) -> int:
    count, x = 0, 1
    while count < n:
        x += 1
        if all(x % d for d in range(2, int(x ** 0.5) + 1)):
            count += 1
    return x


def smallest_k(p: int, threshold: int) -> int:
    k = threshold + 1
    while (k - 1) % (p - 1):
        k += 1
    return k


# -- partial consistent cuts --------------------------------------------------

def cut_consistent(seq_of_handler_lists, triggers: dict, starts: set, scope=None) -> bool:
    """Every checked event has a configured trigger earlier in the sequence,
    unless it is a chain start or has no trigger at all."""
    seen = set()
    for handlers in seq_of_handler_lists:
        for h in handlers:
            if (scope is None or h in scope) and triggers.get(h) and h not in starts:
                if not (set(triggers[h]) & seen):
                    return False
            seen.add(h)
    return True


# -- happens-before from a simulator trace ------------------------------------

def parse_trace(lines):
    for line in lines:
        t, actor, action, kind, uid, dig, detail = line.split("\t")
        fields = dict(f.split("=", 1) for f in detail.split() if "=" in f)
        yield float(t), int(actor), action, kind, int(uid), fields


class HappensBefore:
    """Lamport order over event instances, rebuilt from send/deliver lines.

    An instance is a relayed event request (identified by the relay's uid).
    Process order at each device plus delivery-before-send gives the edges;
    the relation is their transitive closure.
    """

    def __init__(self, trace_lines):
        self.relay_of = {}          # device send uid -> relay uid
        self.handler = {}           # relay uid -> handler
        self.commits = []           # (handlers, relay uid per position)
        local = defaultdict(list)   # device -> [("send", send uid) | ("deliver", relay uid)]
        latest = {}                 # handler -> latest relay uid seen at the gateway
        for _, actor, action, kind, uid, f in parse_trace(trace_lines):
            if kind == "EventRequest" and action == "send" and actor != 0 and "replay" not in f:
                local[actor].append(("send", uid))
            elif kind == "EventRequest" and action == "send" and actor == 0 and "relay_of" in f:
                self.relay_of[int(f["relay_of"])] = uid
                self.handler[uid] = int(f["h"])
                latest[int(f["h"])] = uid
            elif kind == "EventRequest" and action == "deliver":
                local[actor].append(("deliver", uid))
            elif action == "commit":
                hs = [int(h) for h in f["txs"].split(",")]
                self.commits.append((hs, [latest[h] for h in hs]))
        self.succ = defaultdict(set)
        for device, events in local.items():
            seen_before = []
            for kind, uid in events:
                if kind == "deliver":
                    seen_before.append(uid)
                    continue
                relay = self.relay_of.get(uid)
                if relay is None:
                    continue
                for prior in seen_before:
                    self.succ[prior].add(relay)
                seen_before.append(relay)
        self._closure = {}

    def reach(self, a: int) -> set:
        if a not in self._closure:
            out, stack = set(), [a]
            while stack:
                for n in self.succ.get(stack.pop(), ()):
                    if n not in out:
                        out.add(n)
                        stack.append(n)
            self._closure[a] = out
        return self._closure[a]

    def before(self, a: int, b: int) -> bool:
        return b in self.reach(a)

    def violations(self):
        """Committed blocks whose order contradicts happens-before."""
        bad = []
        for hs, inst in self.commits:
            for i, j in itertools.combinations(range(len(inst)), 2):
                if self.before(inst[j], inst[i]):
                    bad.append((hs, i, j))
        return bad


# -- textbook causal broadcast over positional lists ----------------------------

def ref_send(v: list, me: int) -> list:
    out = list(v)
    out[me] += 1
    return out


def ref_deliverable(v: list, ts: list, sender: int) -> bool:
    return ts[sender] == v[sender] + 1 and all(
        ts[k] <= v[k] for k in range(len(v)) if k != sender)


def ref_receive(v: list, ts: list, me: int) -> list:
    out = [max(a, b) for a, b in zip(v, ts)]
    out[me] = v[me] + 1
    return out

"""Monte Carlo check of the all-backups-dead probability against q_f**b,
and the backup count the adaptive rule picks for each q_f."""

import argparse

import numpy as np

from flucdht.keyspace import IntervalId, KeyspaceConfig
from flucdht.routing import LinkEntry, PeerRef, RouteExhaustedError, RoutingTable, backup_size, next_hop


def exhausted_fraction(q, b, trials, rng, cfg):
    rt = RoutingTable(IntervalId("L"))
    rt.entries[1] = LinkEntry(1, IntervalId("R"), [PeerRef(i) for i in range(b)])
    dead = rng.random((trials, b)) < q
    fails = 0
    for row in dead:
        alive = {i for i in range(b) if not row[i]}
        try:
            next_hop(rt, (1 << cfg.l_bits) - 1, cfg, is_live=alive.__contains__)
        except RouteExhaustedError:
            fails += 1
    return fails / trials


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--eps", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    cfg = KeyspaceConfig(8)
    print("q_f   b  measured   q_f^b")
    for q in (0.05, 0.1, 0.3, 0.5):
        for b in (1, 2, 3, 4):
            m = exhausted_fraction(q, b, args.trials, rng, cfg)
            print(f"{q:4.2f}  {b}  {m:.5f}   {q**b:.5f}")
    print(f"\nadaptive b for eps={args.eps}:")
    for q in (0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7):
        print(f"  q_f={q:4.2f} -> b={backup_size(q, args.eps)}")


if __name__ == "__main__":
    main()

"""What the trust-region policy step actually does, iteration by iteration.

Runs RL-T on a small grid and prints the per-step bookkeeping: the KL
budget spent by each accepted update, the line-search scale that was
accepted, and rejected steps (which leave the policy untouched).  The
contract under test everywhere else in the library is visible here: an
accepted step never spends more than the budget zeta.
"""

import numpy as np

from gflow import HyperGrid, Trainer, TrainerConfig
from gflow import exact

ZETA = 0.01


def main():
    env = HyperGrid(2, 8)
    enum = env.enumeration()
    p_star = exact.reward_distribution(enum)
    cfg = TrainerConfig(strategy="RL-T", batch_size=64, lam=0.99, zeta=ZETA,
                        tabular=True, lr_policy=0.04, lr_value=0.3,
                        lr_logz=0.02)
    trainer = Trainer(env, cfg, np.random.default_rng([0, 0]))
    rng = np.random.default_rng([0, 1])

    kls, scales, rejected = [], [], 0
    print(f"{'iter':>5} {'kl':>10} {'scale':>7} {'accepted':>9} {'d_tv':>8}")
    for it in range(300):
        stats = trainer.step(rng)
        if stats["accepted"]:
            kls.append(stats["kl"])
            scales.append(stats["step_scale"])
        else:
            rejected += 1
        if it % 30 == 0 or it == 299:
            fwd = exact.forward_log_table(enum, trainer.suite.forward)
            d_tv = exact.total_variation(
                exact.terminating_distribution(enum, fwd), p_star)
            print(f"{it:>5} {stats['kl']:>10.5f} {stats['step_scale']:>7.3f} "
                  f"{str(stats['accepted']):>9} {d_tv:>8.4f}")

    kls = np.asarray(kls)
    print(f"\naccepted {kls.size} / 300 steps, rejected {rejected}")
    print(f"KL spent per accepted step: max {kls.max():.5f}, "
          f"mean {kls.mean():.5f}, budget {ZETA}")
    print(f"all accepted KLs within budget: {bool((kls <= ZETA + 1e-8).all())}")
    scale_counts = {round(s, 3): scales.count(s)
                    for s in sorted(set(scales), reverse=True)}
    print(f"line-search scales used: {scale_counts}")


if __name__ == "__main__":
    main()

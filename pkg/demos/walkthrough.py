"""Small end-to-end run: link simulation, features, detector, periodic
baselines, a PPO attacker, and a delay-only student.

Budgets are tiny so this finishes in about a minute; the numbers are only
indicative.  Run with ``python3 demos/walkthrough.py``.
"""
import numpy as np

from dosgame import experiments as ex
from dosgame.features import featurize
from dosgame.netsim import AttackBurst, LinkProfile, SimClock, run_window, synthetic_trace


def show_link():
    trace = synthetic_trace(mean_load=2.0, n_intervals=200, seed=1)
    clock = SimClock(0.0, 0.5, 1.0)
    bursts = [AttackBurst(float(t), 0.2, 15.0) for t in range(0, 20, 2)]
    samples = run_window(trace, bursts, clock, 20.0, LinkProfile())
    b = np.array([s.b for s in samples])
    tau = np.array([s.tau for s in samples])
    print(f"link under a 2 s LDoS train: bandwidth {b.min():.2f}-{b.max():.2f} Mbps, "
          f"delay {tau.min() * 1e3:.0f}-{tau.max() * 1e3:.0f} ms")
    print("features of the last 10 samples:", featurize(samples[-10:]))


def main():
    show_link()
    cfg = ex.ExperimentConfig.from_dict({
        "corpus": {"train_offsets": [0.0, 300.0], "test_offsets": [1000.0], "benign_runs": 2},
        "eval_episodes": 5,
    })
    detector, report, _ = ex.build_detector(cfg, "ldos", None, 0)
    print(f"LDoS detector: accuracy {report.accuracy:.3f}, false positives {report.false_positive_rate:.3f}")

    rows = ex.baseline_table(cfg, detector, [0], 5)
    best = max(rows, key=lambda r: r["asr"])
    print(f"best periodic schedule: d={best['duration']} T={best['period']} R={best['rate']} "
          f"ASR {best['asr']:.2f}, bandwidth {best['bandwidth']:.2f} Mbps")

    teacher, curves = ex.train_teacher(cfg, detector, 0, 150)
    asr, _ = ex.summarize(ex.evaluate_agent(cfg, teacher, detector, 0))
    bw, _ = ex.summarize(ex.evaluate_agent(cfg, teacher, detector, 0), "bandwidth")
    print(f"PPO attacker after {len(curves)} episodes: ASR {asr:.2f}, bandwidth {bw:.2f} Mbps")

    student, s_curves, _ = ex.run_reciprocal(cfg, teacher, detector, 0, 50)
    s_asr, _ = ex.summarize(ex.evaluate_agent(cfg, student, detector, 0, observe="partial"))
    print(f"delay-only student after {len(s_curves)} paired episodes: ASR {s_asr:.2f}")

    for row in ex.noise_sweep(cfg, teacher, detector, 0, sigmas=[0.0, 0.1], episodes=3)[::3]:
        print(f"delay noise {row['sigma']:.2f} s: ASR {row['asr']:.2f}")


if __name__ == "__main__":
    main()

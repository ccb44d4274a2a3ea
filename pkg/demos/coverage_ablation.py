"""Does coverage stop the decoder from repeating itself?

The references mention one rare entity several times, each time with a new
attribute, so the decoder has to keep track of which mentions it has
already used. Two models share the same first phase; one then switches
coverage on and the other keeps going without it.

    python demos/coverage_ablation.py [--phase1 800 --phase2 400]
"""

import argparse

import numpy as np

from ptrgen import beam, text, trainer
from ptrgen.synthetic import entity_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--phase1", type=int, default=800)
    ap.add_argument("--phase2", type=int, default=400)
    args = ap.parse_args()

    pairs = entity_task(2200, seed=0)
    vocab = text.build_vocab((text.tokenize(a) for a, _ in pairs), max_size=100)
    train = [text.encode_example(a, s, vocab) for a, s in pairs[:2000]]
    held = pairs[2000:]
    print("example summary:", held[0][1])

    base = dict(vocab_size=vocab.size, d_e=32, d_h=64, seed=0, phase1_steps=args.phase1)
    shared = trainer.train(trainer.TrainConfig(phase2_steps=0, **base), train)
    print(f"shared phase 1 done, loss {np.mean(shared.losses[-50:]):.3f}")

    for coverage in (False, True):
        start = trainer.Checkpoint(shared.params.copy(), {k: v.copy() for k, v in shared.acc.items()},
                                   args.phase1, 1)
        run = trainer.train(trainer.TrainConfig(phase2_steps=args.phase2, coverage=coverage, **base), train,
                            resume=start)
        outs = [beam.beam_search(text.tokenize(a), run.params, vocab, beam=4, max_dec=30, min_dec=1,
                                 use_coverage=coverage).tokens for a, _ in held]
        label = "with coverage   " if coverage else "without coverage"
        exact = np.mean([o == s.split() for o, (_, s) in zip(outs, held)])
        print(f"\n{label}: duplicate-trigram rate {beam.duplicate_rate(outs):.3f}, exact match {exact:.1%}")
        if coverage:
            cov = [row[3] for row in run.history if row[1] == 2]
            print(f"  coverage loss {np.mean(cov[:50]):.3f} (start of phase 2) -> {np.mean(cov[-50:]):.4f} (end)")
        print("  decoded:", " ".join(outs[0]))


if __name__ == "__main__":
    main()

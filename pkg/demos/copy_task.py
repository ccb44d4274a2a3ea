"""Train a small pointer-generator to copy words it has never seen.

Every article contains one token that is missing from the vocabulary. The
summary is that token with its two neighbours, so a plain generator could
only ever output [UNK] in the middle. Watch p_gen drop at the copy step.

    python demos/copy_task.py [--steps 1500]
"""

import argparse
import time

import numpy as np

from ptrgen import beam, text, trainer
from ptrgen.synthetic import copy_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--pairs", type=int, default=2000)
    args = ap.parse_args()

    pairs = copy_task(args.pairs + 200, seed=0)
    vocab = text.build_vocab((text.tokenize(a) + text.tokenize(s) for a, s, _ in pairs), max_size=200)
    train = [text.encode_example(a, s, vocab) for a, s, _ in pairs[: args.pairs]]
    held = pairs[args.pairs :]
    print(f"vocabulary: {vocab.size} ids; every rare token is out of vocabulary")
    print("example article:", pairs[0][0])
    print("example summary:", pairs[0][1])

    cfg = trainer.TrainConfig(vocab_size=vocab.size, d_e=32, d_h=64, phase1_steps=args.steps, phase2_steps=0)
    t0 = time.time()
    result = trainer.train(cfg, train)
    losses = result.losses
    print(f"\ntrained {args.steps} steps in {time.time() - t0:.0f}s; "
          f"loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f} nats/token")

    hits, pgens = 0, []
    for i, (article, summary, rare) in enumerate(held):
        res = beam.beam_search(text.tokenize(article), result.params, vocab, beam=4, max_dec=10, min_dec=1,
                               use_coverage=False)
        if rare in res.tokens:
            hits += 1
            pgens.append(res.hypothesis.p_gens[res.tokens.index(rare)])
        if i < 3:
            print(f"  reference: {summary:<32} decoded: {res.text}")
    print(f"\nrare token reproduced in {hits}/{len(held)} held-out articles")
    if pgens:
        print(f"mean p_gen when emitting it: {np.mean(pgens):.2e} (near 0 means copied, not generated)")


if __name__ == "__main__":
    main()

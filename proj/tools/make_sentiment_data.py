#!/usr/bin/env python3
"""Generate the synthetic sentiment sets under data/.

Both sets use only words from data/toy_corpus.txt, so a vocabulary built
from that corpus covers them without [UNK].

  sentiment_separable.tsv  200 rows. Each sentence holds p positive and n
                           negative cue words with |p - n| >= 2; label =
                           p > n. The set is linearly separable in the
                           (p, n) counts with a margin.
  sentiment_patterns.tsv   400 rows of the form "the <noun> was [very] <cue> .";
                           the cue word's polarity is the label.
"""

import argparse
import random
from pathlib import Path

POSITIVE = ["sweet", "warm", "beautiful", "good", "quiet", "green"]
NEGATIVE = ["cold", "wet", "dark", "late", "strong", "fast"]
NOUNS = ["film", "music", "bread", "river", "garden", "train", "night", "morning",
         "story", "coffee", "cake", "library", "market", "harbour", "moon", "tower"]
FILLER = ["the", "was", "very", "and", "in", "at", "on", "by", "of", "after", "then"]


def phrase(rng, adjective):
    return f"the {rng.choice(NOUNS)} was {'very ' if rng.random() < 0.3 else ''}{adjective}"


def filler(rng):
    return " ".join(rng.choice(FILLER + NOUNS) for _ in range(rng.randint(0, 3)))


def sentence(rng, adjectives):
    parts = [phrase(rng, a) for a in adjectives]
    rng.shuffle(parts)
    extra = filler(rng)
    return " and ".join(parts) + (" " + extra if extra else "") + " ."


def separable(rng, n):
    rows = []
    for i in range(n):
        label = i % 2
        while True:
            p, q = rng.randint(0, 3), rng.randint(0, 3)
            if abs(p - q) >= 2 and (p > q) == bool(label):
                break
        adjectives = [rng.choice(POSITIVE) for _ in range(p)] + [rng.choice(NEGATIVE) for _ in range(q)]
        rows.append((sentence(rng, adjectives), label))
    rng.shuffle(rows)
    return rows


def patterns(rng, n):
    rows = []
    for i in range(n):
        label = i % 2
        rows.append((phrase(rng, rng.choice(POSITIVE if label else NEGATIVE)) + " .", label))
    rng.shuffle(rows)
    return rows


def write(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("sentence\tlabel\n")
        for s, y in rows:
            f.write(f"{s}\t{y}\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default=str(Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write(out / "sentiment_separable.tsv", separable(random.Random(args.seed), 200))
    write(out / "sentiment_patterns.tsv", patterns(random.Random(args.seed + 1), 400))


if __name__ == "__main__":
    main()

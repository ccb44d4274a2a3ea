"""Small generated corpora for exercising the model at desk scale."""

import json

import numpy as np


def word_list(n, prefix="w"):
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def copy_task(n_pairs, n_words=196, article_len=20, seed=0):
    """Articles of random vocabulary words with one unique rare token inside.

    The summary is the rare token flanked by its left and right neighbours
    in the article, so the middle word can only be produced by copying.
    Every rare token occurs exactly once in the whole corpus; with a
    vocabulary of ``n_words + 4`` entries none of them makes the cut.
    Returns ``[(article, summary, rare_token)]``.
    """
    rng = np.random.default_rng(seed)
    words = word_list(n_words)
    rare = word_list(n_pairs, prefix="rare")
    pairs = []
    for k in range(n_pairs):
        toks = [words[i] for i in rng.integers(0, n_words, article_len)]
        pos = int(rng.integers(1, article_len - 1))
        toks[pos] = rare[k]
        summary = [toks[pos - 1], rare[k], toks[pos + 1]]
        pairs.append((" ".join(toks), " ".join(summary), rare[k]))
    return pairs


def entity_task(n_pairs, n_words=96, article_len=30, n_mentions=(3, 5), seed=0):
    """Articles that mention one rare entity several times, each time with a rare attribute.

    The entity token sits right before each attribute token, and the summary
    lists ``entity attr_1 entity attr_2 ...`` in article order. References
    therefore repeat a salient source token without ever repeating a
    trigram; a decoder that loses its place falls into ``entity attr_1
    entity attr_1`` loops. Entities and attributes are unique across the
    corpus, so both can only be copied. Returns ``[(article, summary)]``.
    """
    rng = np.random.default_rng(seed)
    filler = word_list(n_words)
    pairs = []
    attr = 0
    for e in range(n_pairs):
        k = int(rng.integers(n_mentions[0], n_mentions[1] + 1))
        toks = [filler[i] for i in rng.integers(0, n_words, article_len)]
        slots = np.sort(rng.choice(article_len // 2, size=k, replace=False)) * 2
        entity = f"ent{e}"
        summary = []
        for s in slots:
            toks[s], toks[s + 1] = entity, f"attr{attr}"
            summary += [entity, f"attr{attr}"]
            attr += 1
        pairs.append((" ".join(toks), " ".join(summary)))
    return pairs


def write_jsonl(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps({"article": pair[0], "summary": pair[1]}, ensure_ascii=False) + "\n")

"""Vocabulary building, sequence encoding, and dataset generation.

Id space: a single shared vocabulary. Id 0 is reserved for padding,
countries take 1..n and items take n+1..n+m, each group in descending
frequency order with ties kept in first-seen order. Frequent categories
therefore get small ids, which is what the bucketed embedding layouts
assume.

Interchange format: UTF-8 TSV, one user per line,

    user_id <TAB> country <TAB> item1,item2,...

with items listed most-recent-first. The country field may be empty for
datasets that carry no country signal; such sequences encode as plain item
windows. A companion manifest file records the generator settings as
`key=value` lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INPUT_LEN = 128


@dataclass
class UserRecord:
    user_id: str
    country: str  # empty string means "no country"
    items: list  # item keys, most recent first


@dataclass
class VocabMap:
    country_ids: dict
    item_ids: dict
    frequencies: np.ndarray  # indexed by id; frequencies[0] == 0 (padding)

    @property
    def n_countries(self) -> int:
        return len(self.country_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def vocab_size(self) -> int:
        return 1 + self.n_countries + self.n_items


def build_vocab(records) -> VocabMap:
    """Assign frequency-sorted ids to the countries and items in `records`.

    A country's frequency is the number of interactions its users produced;
    an item's frequency is its number of occurrences.
    """
    country_counts: dict[str, int] = {}
    item_counts: dict[str, int] = {}
    any_interaction = False
    for rec in records:
        if rec.country:
            country_counts[rec.country] = (
                country_counts.get(rec.country, 0) + len(rec.items)
            )
        for item in rec.items:
            any_interaction = True
            item_counts[item] = item_counts.get(item, 0) + 1
    if not any_interaction:
        raise ValueError("no interactions: cannot build a vocabulary")

    # dicts preserve insertion (first-seen) order; a stable sort on the
    # negated count keeps that order among ties
    countries = sorted(country_counts, key=lambda k: -country_counts[k])
    items = sorted(item_counts, key=lambda k: -item_counts[k])
    country_ids = {key: i + 1 for i, key in enumerate(countries)}
    offset = 1 + len(countries)
    item_ids = {key: offset + i for i, key in enumerate(items)}

    freqs = np.zeros(1 + len(countries) + len(items), dtype=np.int64)
    for key, cid in country_ids.items():
        freqs[cid] = country_counts[key]
    for key, iid in item_ids.items():
        freqs[iid] = item_counts[key]
    return VocabMap(country_ids, item_ids, freqs)


def encode_sequence(vocab: VocabMap, country, items, input_len: int = INPUT_LEN):
    """Fixed-width input vector: [country id, recent item ids..., padding].

    `items` is most-recent-first; anything beyond the window is dropped.
    With no country the whole window holds items. Unknown keys raise KeyError.
    """
    out = np.zeros(input_len, dtype=np.int64)
    pos = 0
    if country:
        out[0] = vocab.country_ids[country]
        pos = 1
    take = items[: input_len - pos]
    for offset, item in enumerate(take):
        out[pos + offset] = vocab.item_ids[item]
    return out


def make_ranking_examples(vocab: VocabMap, record: UserRecord, label_index: dict,
                          max_per_user: int = 5, input_len: int = INPUT_LEN):
    """Emit up to `max_per_user` (input, label) pairs from one user.

    Each of the user's most recent interactions becomes a label in turn; the
    input window holds the remaining most recent interactions with every
    occurrence of the label item removed, so a label never appears in its
    own input. Labels missing from `label_index` (too rare, or capped away)
    are skipped. Users with fewer than two interactions yield nothing.
    """
    if len(record.items) < 2:
        return []
    examples = []
    for label_key in record.items[:max_per_user]:
        label = label_index.get(label_key)
        if label is None:
            continue
        rest = [it for it in record.items if it != label_key]
        if not rest:
            continue
        inputs = encode_sequence(vocab, record.country, rest, input_len)
        examples.append((inputs, label))
    return examples


@dataclass
class ExampleBatch:
    inputs: np.ndarray  # (b, input_len) int64
    labels: np.ndarray  # (b,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EncodedDataset:
    train: ExampleBatch
    eval: ExampleBatch
    vocab: VocabMap
    label_items: np.ndarray  # label id -> item id in the input vocabulary
    skipped_users: int = 0

    @property
    def num_labels(self) -> int:
        return len(self.label_items)


def build_dataset(records, input_len: int = INPUT_LEN, max_per_user: int = 5,
                  min_label_count: int = 10, label_cap: int | None = None,
                  eval_fraction: float = 0.1, seed: int = 0,
                  max_train_examples: int | None = None) -> EncodedDataset:
    """Turn user records into encoded train/eval batches.

    Users are shuffled with `seed` and split by user, eval taking
    `eval_fraction`. The label space is the training items that occur at
    least `min_label_count` times, most frequent first, optionally capped
    to the `label_cap` most frequent.
    """
    records = list(records)
    if not records:
        raise ValueError("no user records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_eval = int(len(records) * eval_fraction)
    eval_recs = [records[i] for i in order[:n_eval]]
    train_recs = [records[i] for i in order[n_eval:]]

    vocab = build_vocab(records)

    train_item_counts: dict[str, int] = {}
    for rec in train_recs:
        for item in rec.items:
            train_item_counts[item] = train_item_counts.get(item, 0) + 1
    eligible = [k for k, c in train_item_counts.items() if c >= min_label_count]
    eligible.sort(key=lambda k: -train_item_counts[k])
    if label_cap is not None:
        eligible = eligible[:label_cap]
    if not eligible:
        raise ValueError("no item passes the label popularity floor")
    label_index = {key: i for i, key in enumerate(eligible)}
    label_items = np.array([vocab.item_ids[k] for k in eligible], dtype=np.int64)

    def encode_split(recs, cap=None):
        inputs, labels, skipped = [], [], 0
        for rec in recs:
            got = make_ranking_examples(vocab, rec, label_index,
                                        max_per_user, input_len)
            if not got:
                skipped += 1
                continue
            for vec, lab in got:
                inputs.append(vec)
                labels.append(lab)
            if cap is not None and len(labels) >= cap:
                break
        if not labels:
            raise ValueError("split produced no examples")
        inputs = np.stack(inputs)
        labels = np.array(labels, dtype=np.int64)
        if cap is not None:
            inputs, labels = inputs[:cap], labels[:cap]
        return ExampleBatch(inputs, labels), skipped

    train, skipped_train = encode_split(train_recs, max_train_examples)
    eval_, skipped_eval = encode_split(eval_recs)
    return EncodedDataset(train, eval_, vocab, label_items,
                          skipped_users=skipped_train + skipped_eval)


def generate_synthetic(v_items: int, n_users: int, zipf_s: float = 1.1,
                       seq_len_dist: tuple = (20, 60), seed: int = 0,
                       n_countries: int = 20, n_clusters: int = 8,
                       cluster_boost: float = 4.0):
    """Synthetic purchase histories with planted user-preference structure.

    Item popularity follows a Zipf law with exponent `zipf_s`. Each user
    belongs to one of `n_clusters` latent clusters; the items congruent to
    the cluster index get their Zipf weight multiplied by `cluster_boost`,
    so a user's past purchases carry signal about their next one. Clusters
    are balanced, which keeps the marginal item distribution exactly Zipf.

    Each user is generated from a generator seeded by (seed, user index),
    so regenerating any single user, in any order, gives the same history.
    Draws are with replacement: repeat interactions are allowed.
    """
    if v_items < 1 or n_users < 1:
        raise ValueError("need at least one item and one user")
    lo, hi = seq_len_dist
    if not 1 <= lo <= hi:
        raise ValueError(f"bad sequence length range {seq_len_dist}")

    ranks = np.arange(1, v_items + 1, dtype=np.float64)
    base = ranks ** -zipf_s
    cluster_cdfs = []
    for c in range(n_clusters):
        w = base.copy()
        w[np.arange(v_items) % n_clusters == c] *= cluster_boost
        cluster_cdfs.append(np.cumsum(w / w.sum()))

    country_cdf = None
    if n_countries:
        w = np.arange(1, n_countries + 1, dtype=np.float64) ** -zipf_s
        country_cdf = np.cumsum(w / w.sum())

    def draw(cdf, rng, size=None):
        u = rng.random(size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)

    width = len(str(v_items - 1)) if v_items > 1 else 1
    records = []
    for uid in range(n_users):
        rng = np.random.default_rng([seed, uid])
        country = f"c{draw(country_cdf, rng)}" if n_countries else ""
        length = int(rng.integers(lo, hi + 1))
        draws = draw(cluster_cdfs[uid % n_clusters], rng, length)
        items = [f"i{d:0{width}d}" for d in draws[::-1]]  # most recent first
        records.append(UserRecord(f"u{uid}", country, items))
    return records


def write_tsv(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            for key in (rec.user_id, rec.country, *rec.items):
                if "\t" in key or "," in key or "\n" in key:
                    raise ValueError(f"key {key!r} contains a separator")
            fh.write(f"{rec.user_id}\t{rec.country}\t{','.join(rec.items)}\n")


def read_tsv(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise OSError(f"{path}:{lineno}: expected 3 tab-separated fields")
            user, country, items = parts
            records.append(UserRecord(user, country, items.split(",") if items else []))
    return records


def write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key] = value
    return out


def movielens_to_records(ratings_path, item_cap: int | None = 10_000):
    """Adapt a MovieLens ratings.csv (userId,movieId,rating,timestamp).

    Every rating counts as an interaction regardless of its value. When
    `item_cap` is set, only the that many most-rated movies are kept and
    other interactions are dropped. Rows are ordered per user by timestamp,
    most recent first. MovieLens has no country signal.
    """
    by_user: dict[str, list] = {}
    counts: dict[str, int] = {}
    with open(ratings_path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.lower().startswith("userid"):
            raise OSError(f"{ratings_path}: unexpected ratings header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            user, movie, _rating, ts = line.split(",")[:4]
            by_user.setdefault(user, []).append((int(ts), movie))
            counts[movie] = counts.get(movie, 0) + 1
    kept = None
    if item_cap is not None:
        ranked = sorted(counts, key=lambda k: -counts[k])[:item_cap]
        kept = set(ranked)
    records = []
    for user, rows in by_user.items():
        rows.sort(key=lambda r: r[0], reverse=True)
        items = [m for _, m in rows if kept is None or m in kept]
        if items:
            records.append(UserRecord(user, "", items))
    return records

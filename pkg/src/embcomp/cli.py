"""Command-line front end.

Verbs: generate, sweep, fixed-size, quantize, noise-sweep, microbench,
audit-uniqueness. Any long option can also come from a `--config` file of
flat `key=value` lines (`#` starts a comment); explicit command-line flags
win over config entries. Errors exit nonzero with a single `error: ...`
line on stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench, data, io, models, schemes, training
from .errors import ConfigError


def _csv_ints(text: str):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _csv_floats(text: str):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _csv_strs(text: str):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def read_config_file(path) -> dict:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            entries[key.strip()] = value.strip()
    return entries


def _apply_config(ns, parser, argv) -> None:
    if not getattr(ns, "config", None):
        return
    entries = read_config_file(ns.config)
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    actions = {a.dest: a for a in parser._actions}
    for key, raw in entries.items():
        dest = key.replace("-", "_")
        if dest in ("config", "help"):
            continue
        if dest in explicit:
            continue
        action = actions.get(dest)
        if action is None:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            setattr(ns, dest, raw.lower() in ("1", "true", "yes", "on"))
        elif action.type is not None:
            setattr(ns, dest, action.type(raw))
        else:
            setattr(ns, dest, raw)


def _add_dataset_args(sp) -> None:
    sp.add_argument("--dataset", required=True, help="input TSV path")
    sp.add_argument("--input-len", type=int, default=data.INPUT_LEN)
    sp.add_argument("--max-per-user", type=int, default=5)
    sp.add_argument("--min-label-count", type=int, default=10)
    sp.add_argument("--label-cap", type=int, default=None)
    sp.add_argument("--eval-fraction", type=float, default=0.1)
    sp.add_argument("--max-train-examples", type=int, default=None)


def _add_training_args(sp) -> None:
    sp.add_argument("--variant", default="classifier", choices=models.VARIANTS)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--learning-rate", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--optimizer", default="adam", choices=("sgd", "adam"))
    sp.add_argument("--dropout", type=float, default=0.2)
    sp.add_argument("--metric", default="accuracy", choices=("accuracy", "ndcg"))
    sp.add_argument("--seed", type=int, default=0)


def _add_scheme_args(sp, default_kind="memcom_nobias") -> None:
    sp.add_argument("--scheme", default=default_kind, choices=schemes.KINDS)
    sp.add_argument("--embed-dim", type=int, default=256)
    sp.add_argument("--m", type=int, default=0, help="bucket count")
    sp.add_argument("--inner-dim", type=int, default=0)
    sp.add_argument("--keep-top", type=int, default=0)


def _scheme_kwargs(ns) -> dict:
    kwargs = {"embed_dim": ns.embed_dim}
    if ns.scheme in schemes.BUCKETED_KINDS:
        kwargs["buckets"] = ns.m
    if ns.scheme == "factorized":
        kwargs["inner_dim"] = ns.inner_dim
    if ns.scheme == "truncate_rare":
        kwargs["keep_top"] = ns.keep_top
    return kwargs


def _sweep_config(ns, **overrides) -> bench.SweepConfig:
    base = dict(
        dataset=ns.dataset,
        out=getattr(ns, "out", None),
        metric=ns.metric,
        variant=ns.variant,
        input_len=ns.input_len,
        max_per_user=ns.max_per_user,
        min_label_count=ns.min_label_count,
        label_cap=ns.label_cap,
        eval_fraction=ns.eval_fraction,
        max_train_examples=ns.max_train_examples,
        epochs=ns.epochs,
        learning_rate=ns.learning_rate,
        batch_size=ns.batch_size,
        optimizer=ns.optimizer,
        dropout_rate=ns.dropout,
        seed=ns.seed,
    )
    base.update(overrides)
    return bench.SweepConfig(**base)


def cmd_generate(ns) -> int:
    records = data.generate_synthetic(
        v_items=ns.items, n_users=ns.users, zipf_s=ns.zipf_s,
        seq_len_dist=(ns.len_min, ns.len_max), seed=ns.seed,
        n_countries=ns.countries, n_clusters=ns.clusters,
        cluster_boost=ns.boost,
    )
    tsv = f"{ns.out}.tsv"
    manifest = f"{ns.out}.manifest"
    data.write_tsv(tsv, records)
    interactions = sum(len(r.items) for r in records)
    data.write_manifest(manifest, {
        "items": ns.items,
        "countries": ns.countries,
        "users": ns.users,
        "interactions": interactions,
        "zipf_s": ns.zipf_s,
        "len_min": ns.len_min,
        "len_max": ns.len_max,
        "clusters": ns.clusters,
        "boost": ns.boost,
        "seed": ns.seed,
    })
    print(f"wrote {tsv} ({ns.users} users, {interactions} interactions)")
    print(f"wrote {manifest}")
    return 0


def cmd_sweep(ns) -> int:
    cfg = _sweep_config(
        ns,
        schemes=ns.schemes,
        buckets=ns.buckets,
        dims=ns.dims,
        repeats=ns.repeats,
        baseline_dim=ns.baseline_dim,
        workers=ns.workers,
    )
    reports = bench.run_sweep(cfg)
    print(f"wrote {ns.out} ({len(reports)} rows)")
    return 0


def cmd_fixed_size(ns) -> int:
    budget = int(ns.budget_mb * 1024 * 1024)
    rows = bench.fixed_size_search(
        budget_bytes=budget, kind=ns.scheme, vocab_size=ns.vocab,
        num_labels=ns.num_labels, bucket_grid=ns.buckets,
        variant=ns.variant, max_dim=ns.max_dim,
    )
    print("m,e,bytes,feasible")
    for row in rows:
        e = "" if row["e"] is None else row["e"]
        nbytes = "" if row["bytes"] is None else row["bytes"]
        print(f"{row['m']},{e},{nbytes},{str(row['feasible']).lower()}")
    return 0


def _train_single(ns):
    cfg = _sweep_config(ns)
    dataset = bench.load_sweep_dataset(cfg)
    scheme_cfg = schemes.SchemeConfig(
        kind=ns.scheme, vocab_size=dataset.vocab.vocab_size, seed=ns.seed,
        **_scheme_kwargs(ns),
    )
    net, _ = bench.train_and_eval(dataset, scheme_cfg, cfg, ns.seed)
    return net, dataset


def cmd_quantize(ns) -> int:
    if ns.checkpoint:
        net = models.load_model(ns.checkpoint)
        cfg = _sweep_config(ns)
        dataset = bench.load_sweep_dataset(cfg)
    else:
        net, dataset = _train_single(ns)
    if ns.save_model:
        models.save_model(ns.save_model, net)
    base = training.evaluate(net, dataset.eval, dataset.label_items)
    lines = ["bits,size_bytes,accuracy,ndcg"]
    full_bytes = sum(t.size * 8 for t in net.state().values())
    lines.append(f"64,{full_bytes},{base.accuracy:.6f},{base.ndcg:.6f}")
    for bits in ns.bits:
        size_bytes, report = training.quantize_eval(
            net, bits, dataset.eval, dataset.label_items
        )
        lines.append(f"{bits},{size_bytes},{report.accuracy:.6f},{report.ndcg:.6f}")
    text = "\n".join(lines)
    if ns.out:
        with open(ns.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {ns.out}")
    else:
        print(text)
    return 0


def cmd_noise_sweep(ns) -> int:
    cfg = _sweep_config(ns)
    reports = bench.noise_sweep(
        cfg, kind=ns.scheme, scheme_kwargs=_scheme_kwargs(ns),
        multipliers=ns.multipliers, l2_clip=ns.l2_clip,
    )
    if ns.out:
        print(f"wrote {ns.out} ({len(reports)} rows)")
    else:
        for r in reports:
            print(f"{r.kind_params}: {r.metric}={r.metric_value:.6f}")
    return 0


def cmd_microbench(ns) -> int:
    result = bench.microbench_lookup_vs_onehot(
        vocab_size=ns.vocab, embed_dim=ns.dim, buckets=ns.m or None,
        batch=ns.batch, iterations=ns.iterations, dtype=ns.dtype, seed=ns.seed,
    )
    for key, value in result.items():
        print(f"{key}={value}")
    return 0


def cmd_audit_uniqueness(ns) -> int:
    if ns.checkpoint:
        header, _ = io.read_blocks(ns.checkpoint)
        if header.get("format") == "model-v1":
            params = models.load_model(ns.checkpoint).scheme
        else:
            params = schemes.load_scheme(ns.checkpoint)
    else:
        net, _ = _train_single(ns)
        if ns.save_model:
            models.save_model(ns.save_model, net)
        params = net.scheme
    result = schemes.uniqueness_audit(params, threshold=ns.threshold)
    print(f"pairs_checked={result['pairs_checked']}")
    print(f"fraction_distinct={result['fraction_distinct']:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="embcomp",
        description="benchmark compressed embedding tables",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    table = {}

    sp = sub.add_parser("generate", help="write a synthetic interaction TSV")
    sp.add_argument("--out", required=True, help="output path prefix")
    sp.add_argument("--items", type=int, default=10_000)
    sp.add_argument("--users", type=int, default=5_000)
    sp.add_argument("--zipf-s", type=float, default=1.1)
    sp.add_argument("--len-min", type=int, default=20)
    sp.add_argument("--len-max", type=int, default=60)
    sp.add_argument("--countries", type=int, default=20)
    sp.add_argument("--clusters", type=int, default=8)
    sp.add_argument("--boost", type=float, default=4.0)
    sp.add_argument("--seed", type=int, default=0)
    table["generate"] = (sp, cmd_generate)

    sp = sub.add_parser("sweep", help="train the scheme grid and emit a CSV")
    _add_dataset_args(sp)
    _add_training_args(sp)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--schemes", type=_csv_strs,
                    default=("naive_hash", "qr_mult", "memcom_nobias"))
    sp.add_argument("--buckets", type=_csv_ints, default=None)
    sp.add_argument("--dims", type=_csv_ints, default=bench.DEFAULT_DIM_GRID)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--baseline-dim", type=int, default=256)
    sp.add_argument("--workers", type=int, default=1)
    table["sweep"] = (sp, cmd_sweep)

    sp = sub.add_parser("fixed-size", help="largest widths under a byte budget")
    sp.add_argument("--budget-mb", type=float, default=20.0)
    sp.add_argument("--scheme", default="memcom_nobias", choices=schemes.KINDS)
    sp.add_argument("--vocab", type=int, required=True)
    sp.add_argument("--num-labels", type=int, required=True)
    sp.add_argument("--buckets", type=_csv_ints, required=True)
    sp.add_argument("--variant", default="classifier", choices=models.VARIANTS)
    sp.add_argument("--max-dim", type=int, default=1024)
    table["fixed-size"] = (sp, cmd_fixed_size)

    sp = sub.add_parser("quantize", help="evaluate a model at reduced precision")
    _add_dataset_args(sp)
    _add_training_args(sp)
    _add_scheme_args(sp)
    sp.add_argument("--checkpoint", default=None, help="model file; else train")
    sp.add_argument("--save-model", default=None)
    sp.add_argument("--bits", type=_csv_ints, default=(16, 8, 4))
    sp.add_argument("--out", default=None)
    table["quantize"] = (sp, cmd_quantize)

    sp = sub.add_parser("noise-sweep", help="train across noise multipliers")
    _add_dataset_args(sp)
    _add_training_args(sp)
    _add_scheme_args(sp, default_kind="uncompressed")
    sp.add_argument("--multipliers", type=_csv_floats, default=(0.0, 0.5, 1.0, 2.0))
    sp.add_argument("--l2-clip", type=float, default=1.0)
    sp.add_argument("--out", default=None)
    table["noise-sweep"] = (sp, cmd_noise_sweep)

    sp = sub.add_parser("microbench", help="time gather vs one-hot matmul")
    sp.add_argument("--vocab", type=int, default=100_000)
    sp.add_argument("--dim", type=int, default=256)
    sp.add_argument("--m", type=int, default=0, help="bucket count, 0 = vocab")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--iterations", type=int, default=50)
    sp.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    sp.add_argument("--seed", type=int, default=0)
    table["microbench"] = (sp, cmd_microbench)

    sp = sub.add_parser("audit-uniqueness",
                        help="fraction of same-bucket pairs with distinct multipliers")
    _add_dataset_args(sp)
    _add_training_args(sp)
    _add_scheme_args(sp)
    sp.add_argument("--checkpoint", default=None, help="scheme or model file")
    sp.add_argument("--save-model", default=None)
    sp.add_argument("--threshold", type=float, default=1e-5)
    table["audit-uniqueness"] = (sp, cmd_audit_uniqueness)

    for sp, _handler in table.values():
        sp.add_argument("--config", default=None,
                        help="key=value file supplying defaults for any flag")
    return parser, table


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, table = build_parser()
    try:
        ns = parser.parse_args(argv)
        subparser, handler = table[ns.verb]
        _apply_config(ns, subparser, argv)
        return handler(ns)
    except (ValueError, OSError, KeyError, IndexError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import numpy as np
import pytest

from embcomp import bench, data, models, schemes
from embcomp.cli import main


@pytest.fixture(scope="module")
def tsv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "toy.tsv"
    records = data.generate_synthetic(v_items=12, n_users=150, seed=3,
                                      seq_len_dist=(6, 12), n_countries=3)
    data.write_tsv(path, records)
    return str(path)


DATASET_FLAGS = ["--input-len", "6", "--min-label-count", "2"]
FAST_TRAIN = ["--epochs", "1", "--batch-size", "64"]
SMALL_SCHEME = ["--scheme", "memcom_nobias", "--embed-dim", "8", "--m", "8"]


def test_generate_writes_tsv_and_manifest(tmp_path, capsys):
    prefix = str(tmp_path / "synth")
    rc = main(["generate", "--out", prefix, "--items", "12", "--users", "40",
               "--len-min", "4", "--len-max", "8", "--countries", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"wrote {prefix}.tsv" in out
    assert f"wrote {prefix}.manifest" in out
    records = data.read_tsv(prefix + ".tsv")
    assert len(records) == 40
    manifest = data.read_manifest(prefix + ".manifest")
    assert manifest["items"] == "12"
    assert int(manifest["interactions"]) == sum(len(r.items) for r in records)


def test_sweep_writes_report(tsv, tmp_path, capsys):
    out = str(tmp_path / "sweep.csv")
    rc = main(["sweep", "--dataset", tsv, "--out", out,
               "--schemes", "naive_hash", "--buckets", "8", "--dims", "4",
               "--repeats", "1", "--baseline-dim", "8",
               *DATASET_FLAGS, *FAST_TRAIN])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out
    rows = bench.read_report(out)
    assert {r["scheme"] for r in rows} == {"uncompressed", "naive_hash"}
    assert len(rows) == 2


def test_fixed_size_prints_the_table(capsys):
    rc = main(["fixed-size", "--budget-mb", "0.1", "--vocab", "500",
               "--num-labels", "7", "--buckets", "100,50"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "m,e,bytes,feasible"
    want = bench.fixed_size_search(
        int(0.1 * 1024 * 1024), "memcom_nobias", 500, 7, (100, 50)
    )
    got = [line.split(",") for line in lines[1:]]
    assert [int(g[0]) for g in got] == [r["m"] for r in want]
    assert [int(g[1]) for g in got] == [r["e"] for r in want]
    assert all(g[3] == "true" for g in got)


def test_quantize_inline_reports_all_rows(tsv, tmp_path, capsys):
    ckpt = str(tmp_path / "model.bin")
    rc = main(["quantize", "--dataset", tsv, *DATASET_FLAGS, *FAST_TRAIN,
               *SMALL_SCHEME, "--bits", "16,8", "--save-model", ckpt])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "bits,size_bytes,accuracy,ndcg"
    table = {int(parts[0]): parts for parts in
             (line.split(",") for line in lines[1:])}
    assert set(table) == {64, 16, 8}
    net = models.load_model(ckpt)
    assert int(table[64][1]) == sum(t.size * 8 for t in net.state().values())
    for bits in (64, 16, 8):
        assert 0.0 <= float(table[bits][2]) <= 1.0
    assert int(table[8][1]) < int(table[16][1]) < int(table[64][1])


def test_quantize_out_file(tsv, tmp_path, capsys):
    out = str(tmp_path / "quant.csv")
    rc = main(["quantize", "--dataset", tsv, *DATASET_FLAGS, *FAST_TRAIN,
               *SMALL_SCHEME, "--bits", "16", "--out", out])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out
    with open(out, encoding="utf-8") as fh:
        assert fh.readline().strip() == "bits,size_bytes,accuracy,ndcg"


def test_audit_uniqueness_trains_saves_and_reloads(tsv, tmp_path, capsys):
    ckpt = str(tmp_path / "audited.bin")
    rc = main(["audit-uniqueness", "--dataset", tsv, *DATASET_FLAGS,
               *FAST_TRAIN, *SMALL_SCHEME, "--save-model", ckpt])
    assert rc == 0
    first = capsys.readouterr().out
    assert "pairs_checked=" in first
    trained_fraction = first.strip().splitlines()[-1]
    assert trained_fraction.startswith("fraction_distinct=")

    rc = main(["audit-uniqueness", "--dataset", tsv, "--checkpoint", ckpt])
    assert rc == 0
    second = capsys.readouterr().out
    assert second.strip().splitlines()[-1] == trained_fraction


def test_audit_uniqueness_reads_scheme_files(tmp_path, capsys):
    path = str(tmp_path / "scheme.bin")
    cfg = schemes.SchemeConfig(kind="memcom_bias", vocab_size=40, embed_dim=4,
                               buckets=7, seed=0)
    schemes.save_scheme(path, schemes.build_scheme(cfg))
    rc = main(["audit-uniqueness", "--dataset", "unused.tsv",
               "--checkpoint", path])
    assert rc == 0
    out = capsys.readouterr().out
    # fresh multipliers are all ones, so no same-bucket pair is distinct
    assert "fraction_distinct=0.000000" in out


def test_microbench_prints_keys(capsys):
    rc = main(["microbench", "--vocab", "2000", "--dim", "16",
               "--iterations", "5"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    keys = [line.split("=", 1)[0] for line in lines]
    assert keys == ["gather_ns", "onehot_ns", "speedup",
                    "predicted_values_gather", "predicted_values_onehot",
                    "measured_bytes_gather", "measured_bytes_onehot"]


def test_config_file_supplies_defaults_but_flags_win(tmp_path, capsys):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text("vocab=3000\ndim=8  # overridden below\niterations=3\n")
    rc = main(["microbench", "--config", str(cfg), "--dim", "16"])
    assert rc == 0
    out = dict(line.split("=", 1)
               for line in capsys.readouterr().out.strip().splitlines())
    assert out["predicted_values_onehot"] == str(16 + 3000)
    assert out["predicted_values_gather"] == str(16 + 1)


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("vocabulary=3000\n")
    rc = main(["microbench", "--config", str(cfg)])
    assert rc == 1
    assert "unknown config key" in capsys.readouterr().err


def test_noise_sweep_prints_rows(tsv, capsys):
    rc = main(["noise-sweep", "--dataset", tsv, *DATASET_FLAGS, *FAST_TRAIN,
               *SMALL_SCHEME, "--multipliers", "0.0,1.0", "--l2-clip", "0.5",
               "--max-train-examples", "64"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("noise=0.0;l2_clip=0.5: accuracy=")
    assert lines[1].startswith("noise=1.0;l2_clip=0.5: accuracy=")


def test_errors_exit_nonzero_with_message(tmp_path, capsys):
    rc = main(["sweep", "--dataset", str(tmp_path / "missing.tsv"),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")

    rc = main(["quantize", "--dataset", str(tmp_path / "missing.tsv"),
               "--bits", "12"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")

import csv

import numpy as np
import pytest

from ditmoe import accounting
from ditmoe.analyze import load_trace, save_trace
from ditmoe.cli import TRAIN_KEYS, build_parser, main
from ditmoe.config import (
    MODEL_KEYS,
    config_to_dict,
    dumps_config,
    get_preset,
    loads_config,
    parse_kv_text,
    presets,
    save_config,
)
from ditmoe.data import load_dataset, toy_source, write_dataset
from ditmoe.model import count_elements, init_params
from ditmoe.moe import RoutingTrace
from ditmoe.pnm import read_pnm, write_pnm

from conftest import small_config

FAST = ["batch_size=4", "toy_per_class=4", "lr=0.001"]


def train(tmp_path, name, *extra, steps=10):
    out = tmp_path / name
    assert main(["train", "tiny", *FAST, *extra, "--steps", str(steps), "--out", str(out)]) == 0
    return out


def read_log(path):
    with open(path / "loss_log.csv", newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    return train(tmp, "a", "checkpoint_every=5")


def test_train_log_rows(trained):
    rows = read_log(trained)
    assert rows[0] == ["step", "mse", "vlb", "balance", "total"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 11))
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])
    assert sorted(p.name for p in trained.glob("*.dmck")) == ["ckpt_000005.dmck", "ckpt_000010.dmck", "final.dmck"]


def test_train_deterministic(tmp_path, trained):
    again = train(tmp_path, "b", "checkpoint_every=5")
    assert (again / "loss_log.csv").read_bytes() == (trained / "loss_log.csv").read_bytes()
    assert (again / "final.dmck").read_bytes() == (trained / "final.dmck").read_bytes()


def test_train_rectified_flow_column(tmp_path):
    out = train(tmp_path, "rf", "--objective", "rectified_flow", steps=3)
    rows = read_log(out)
    assert rows[0][1] == "rf_mse"
    assert all(float(r[2]) == 0.0 for r in rows[1:])
    assert main(["sample", str(out / "final.dmck"), "--steps", "2", "--out", str(tmp_path / "s")]) == 1


def test_train_from_dataset_dir(tmp_path):
    data = write_dataset(toy_source(2, 3, size=8, seed=0), tmp_path / "data")
    out = train(tmp_path, "d", f"data={data}", steps=2)
    assert len(read_log(out)) == 3
    assert main(["train", "tiny", f"data={tmp_path / 'missing'}", "--steps", "1", "--out", str(tmp_path / "x")]) == 1


def test_unknown_key_single_line_error(tmp_path, capsys):
    rc = main(["train", "tiny", "bogus_key=1", "--steps", "1", "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert rc != 0
    assert err.startswith("error:") and err.count("\n") == 1 and "bogus_key" in err


def test_bad_values_and_paths(tmp_path, capsys):
    assert main(["train", "tiny", "depth=abc", "--steps", "1", "--out", str(tmp_path / "x")]) != 0
    assert main(["train", "no_such_preset", "--out", str(tmp_path / "x")]) != 0
    assert main(["sample", str(tmp_path / "missing.dmck"), "--out", str(tmp_path / "y")]) != 0
    assert main(["analyze", str(tmp_path / "missing.dmtr"), "--by", "class", "--out", str(tmp_path / "z")]) != 0
    assert main(["inspect", "no_such_preset"]) != 0
    for line in capsys.readouterr().err.strip().splitlines():
        assert line.startswith("error:")


def test_sample_deterministic_and_class_range(tmp_path, trained):
    ck = str(trained / "final.dmck")
    for name in ("s1", "s2"):
        assert main(["sample", ck, "--class", "1", "--steps", "4", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    a, b = (read_pnm(tmp_path / n / "sample_c1_00000.pgm") for n in ("s1", "s2"))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 8)
    assert main(["sample", ck, "--class", "2", "--out", str(tmp_path / "bad")]) == 1
    assert main(["sample", ck, "--class", "x", "--out", str(tmp_path / "bad")]) == 1


def test_sample_all_classes_with_trace(tmp_path, trained):
    out = tmp_path / "s"
    assert main(["sample", str(trained / "final.dmck"), "--class", "all", "--n", "3", "--steps", "5",
                 "--trace", "--batch", "2", "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 6
    tf = load_trace(out / "trace.dmtr")
    cfg = get_preset("tiny")
    assert len(tf.trace) == 6 * 5 * len(cfg.moe_layers()) * cfg.num_tokens
    assert tf.num_steps == 5


def test_analyze_outputs(tmp_path, capsys):
    cfg_path = tmp_path / "twelve.cfg"
    save_config(small_config(depth=12, num_classes=2), cfg_path)
    run = tmp_path / "run"
    assert main(["train", str(cfg_path), *FAST, "--steps", "1", "--out", str(run)]) == 0
    shards = []
    for i in range(2):
        d = tmp_path / f"shard{i}"
        assert main(["sample", str(run / "final.dmck"), "--class", str(i), "--steps", "7", "--trace",
                     "--out", str(d)]) == 0
        shards.append(str(d / "trace.dmtr"))
    res = tmp_path / "res"
    assert main(["analyze", *shards, "--by", "timestep", "--out", str(res)]) == 0
    assert len(list(res.glob("heatmap_timestep_layer*.pgm"))) == 12
    assert read_pnm(res / "heatmap_timestep_layer00.pgm").shape == (7, 4)
    assert "mean entropy" in capsys.readouterr().out
    rows = list(csv.DictReader(open(res / "routing_timestep.csv", newline="")))
    assert len(rows) == 12 * 7 * 4
    assert sum(int(r["count"]) for r in rows) == 2 * 7 * 12 * 4 * 2


def test_analyze_shards_match_concatenation(tmp_path, trained):
    ck = str(trained / "final.dmck")
    shards = []
    for seed in (0, 1):
        d = tmp_path / f"s{seed}"
        assert main(["sample", ck, "--class", "all", "--steps", "3", "--seed", str(seed), "--trace",
                     "--out", str(d)]) == 0
        shards.append(load_trace(d / "trace.dmtr"))
    joined = RoutingTrace(shards[0].K)
    for tf in shards:
        joined.extend(tf.trace)
    shards[0].trace = joined
    save_trace(tmp_path / "joined.dmtr", shards[0])
    for kind in ("class", "position", "timestep"):
        assert main(["analyze", str(tmp_path / "s0" / "trace.dmtr"), str(tmp_path / "s1" / "trace.dmtr"),
                     "--by", kind, "--out", str(tmp_path / "r1")]) == 0
        assert main(["analyze", str(tmp_path / "joined.dmtr"), "--by", kind, "--out", str(tmp_path / "r2")]) == 0
        name = f"routing_{kind}.csv"
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_analyze_rejects_mixed_configs(tmp_path, trained):
    other = tmp_path / "cfg"
    save_config(small_config(num_classes=2), other)
    run = tmp_path / "run"
    assert main(["train", str(other), *FAST, "--steps", "1", "--out", str(run)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", str(trained / "final.dmck"), "--steps", "2", "--trace", "--out", str(a)]) == 0
    assert main(["sample", str(run / "final.dmck"), "--steps", "2", "--trace", "--out", str(b)]) == 0
    assert main(["analyze", str(a / "trace.dmtr"), str(b / "trace.dmtr"), "--by", "class",
                 "--out", str(tmp_path / "r")]) == 1


def test_inspect_xl_params(capsys):
    assert main(["inspect", "XL/2-8E2A", "--params"]) == 0
    out = capsys.readouterr().out
    total = int(out.split("total")[1].split()[0].replace(",", ""))
    activated = int(out.split("activated")[1].split()[0].replace(",", ""))
    assert abs(total / 4.1e9 - 1) < 0.02 and abs(activated / 1.5e9 - 1) < 0.015
    assert "%" in out


def test_inspect_s_flops(capsys):
    assert main(["inspect", "S/2-8E2A", "--flops"]) == 0
    out = capsys.readouterr().out
    g = float(out.split(":")[1].split()[0])
    assert abs(g - 15.43) / 15.43 < 0.005
    assert "reference 15.43" in out


def test_inspect_custom_config_matches_enumeration(tmp_path, capsys):
    cfg = small_config()
    path = tmp_path / "c.cfg"
    save_config(cfg, path)
    assert main(["inspect", str(path), "--params"]) == 0
    total = int(capsys.readouterr().out.split("total")[1].split()[0].replace(",", ""))
    assert total == accounting.param_count(cfg).total == count_elements(init_params(cfg, 0))
    assert main(["inspect", str(path), "lr=1"]) == 1  # training keys are not accepted by inspect


def test_help_lists_every_key(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    text = sub["train"].format_help()
    for key in list(MODEL_KEYS) + list(TRAIN_KEYS):
        assert key in text
    for name in presets():
        assert name in text
    assert all(k in sub["inspect"].format_help() for k in MODEL_KEYS)


@pytest.mark.parametrize("name", sorted(presets()))
def test_config_round_trip(name):
    cfg = get_preset(name)
    text = dumps_config(cfg)
    again = loads_config(text)
    assert again == cfg
    assert dumps_config(again) == text
    assert parse_kv_text(text) == config_to_dict(cfg)


def test_config_comments_and_errors():
    cfg = loads_config("# a comment\ndepth = 3\n\nwidth=16  # trailing\nheads=2\n")
    assert (cfg.depth, cfg.width, cfg.heads) == (3, 16, 2)
    with pytest.raises((KeyError, ValueError)):
        loads_config("nonsense = 1\n")
    with pytest.raises(ValueError):
        loads_config("depth 3\n")


# -- image I/O --------------------------------------------------------------------


def test_pnm_round_trip(tmp_path, rng):
    grey = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    write_pnm(tmp_path / "g.pgm", grey)
    write_pnm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), grey)
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), rgb)
    (tmp_path / "h.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert read_pnm(tmp_path / "h.pgm").tolist() == [[1, 2]]
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "t.pgm")


def test_dataset_round_trip(tmp_path):
    src = toy_source(3, 2, size=4, seed=1)
    back = load_dataset(write_dataset(src, tmp_path / "d"))
    np.testing.assert_array_equal(back.labels, src.labels)
    np.testing.assert_allclose(back.images, src.images, atol=1 / 255 + 1e-6)
    (tmp_path / "d" / "index.txt").write_text("0/00000.pgm 1\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "d")

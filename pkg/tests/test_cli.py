import importlib
import os
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from retrieval_index import load_index
from texhash import COMMANDS, main
from texture_data import read_manifest, read_ppm


@pytest.fixture
def tiny_config_file(tmp_path, tiny_cfg):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_cfg.echo())
    return str(path)


def stderr_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return lines[0]


# === Parser ===
@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train-everything"])
    assert exc.value.code == 2


# === Exit codes ===
def test_config_error_exit_code(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--set", "colour=red"]) == 2
    assert stderr_line(capsys).startswith("error code=CONFIG_ERROR exit=2: ")
    assert not (tmp_path / "data").exists()


def test_data_error_exit_code(tmp_path, capsys):
    assert main(["export-workbook", "--results", str(tmp_path), "--out", str(tmp_path / "book.txt")]) == 3
    assert stderr_line(capsys).startswith("error code=DATA_ERROR exit=3: ")


def test_corrupt_checkpoint_exit_code(tmp_path, capsys):
    bogus = tmp_path / "bogus.tsnw"
    bogus.write_bytes(b"NOPE" + bytes(16))
    assert main(["synth", "--checkpoint", str(bogus), "--patch", "p.ppm", "--out", str(tmp_path / "o.ppm")]) == 3
    assert stderr_line(capsys).startswith("error code=CHECKPOINT_FORMAT_ERROR exit=3: ")


def test_missing_file_exit_code(tmp_path, capsys):
    absent = str(tmp_path / "absent.tsnw")
    assert main(["synth", "--checkpoint", absent, "--patch", "p.ppm", "--out", str(tmp_path / "o.ppm")]) == 5
    assert stderr_line(capsys).startswith("error code=IO_ERROR exit=5: ")


def test_library_value_error_is_a_data_error(tmp_path, capsys, monkeypatch):
    synth_stage = importlib.import_module("03_synth")

    def broken(*_):
        raise ValueError("conv2d: input 1x1 smaller than kernel 4x4")

    monkeypatch.setattr(synth_stage, "synth", broken)
    assert main(["synth", "--checkpoint", "c.tsnw", "--patch", "p.ppm", "--out", str(tmp_path / "o.ppm")]) == 3
    assert stderr_line(capsys) == "error code=DATA_ERROR exit=3: conv2d: input 1x1 smaller than kernel 4x4"


def test_lsh_rows_report_origin_and_centred_planes(tiny_cfg, rng):
    ablate = importlib.import_module("08_ablate")
    labels = np.repeat([0, 1], 6)
    db = 10.0 + 0.01 * rng.normal(size=(12, 4))
    db[:, 0] += np.where(labels == 0, 1.0, -1.0)
    q = db[[0, 1, 6, 7]]
    data = SimpleNamespace(db_ids=np.arange(100, 112), db_labels=labels, q_labels=labels[[0, 1, 6, 7]])

    origin, centred = ablate.lsh_rows("lbp-lsh", db, q, data, tiny_cfg)
    assert origin["variant"] == "lbp-lsh" and centred["variant"] == "lbp-lsh[centred]"
    assert origin["code_bits"] == centred["code_bits"] == tiny_cfg.code_bits
    assert centred["map_at_t"] == pytest.approx(1.0)
    assert centred["map_at_t"] >= origin["map_at_t"]


# === Stage 1 wiring ===
def test_gen_data_train_tsn_and_synth(tmp_path, tiny_config_file):
    data = str(tmp_path / "data")
    tsn = str(tmp_path / "tsn.tsnw")
    assert main(["gen-data", "--config", tiny_config_file, "--out", data]) == 0
    manifest = read_manifest(os.path.join(data, "manifest.tsv"))
    assert manifest.groupby("split").size().to_dict() == {"test": 8, "train": 16}
    assert os.path.exists(os.path.join(data, "manifest.tsv.cfg"))
    assert os.path.exists(os.path.join(data, "class_gallery.png"))

    assert main(["train-tsn", "--config", tiny_config_file, "--data", data, "--out", tsn]) == 0
    losses = pd.read_csv(str(tmp_path / "tsn_losses.csv"))
    assert list(losses.columns) == ["step", "adv", "style", "l1", "total"]
    assert len(losses) == 3

    out = str(tmp_path / "big.ppm")
    assert main(["synth", "--checkpoint", tsn, "--patch", os.path.join(data, "patches", "000000.ppm"), "--out", out]) == 0
    expanded = read_ppm(out)
    assert expanded.shape == (16, 16, 3)
    assert "patch_size=8\n" in open(f"{out}.cfg", encoding="utf-8").read()


# === Whole pipeline ===
@pytest.mark.slow
def test_full_pipeline(tmp_path, tiny_config_file, capsys):
    data = str(tmp_path / "data")
    run = tmp_path / "run"
    tsn, model, index = str(run / "tsn.tsnw"), str(run / "hash.hshm"), str(run / "db.txix")
    assert main(["gen-data", "--config", tiny_config_file, "--out", data]) == 0
    assert main(["train-tsn", "--config", tiny_config_file, "--data", data, "--out", tsn]) == 0
    assert main(["train-hash", "--config", tiny_config_file, "--data", data, "--tsn", tsn, "--out", model]) == 0
    assert os.path.exists(str(run / "hash.fusd"))
    codes = pd.read_parquet(str(run / "hash_codes.parquet"))
    assert codes.shape == (16, 9)

    assert main(["build-index", "--model", model, "--data", data, "--out", index]) == 0
    built = load_index(index)
    assert (len(built), built.k) == (16, 8)

    capsys.readouterr()
    query_patch = os.path.join(data, "patches", "000016.ppm")
    assert main(["query", "--index", index, "--model", model, "--patch", query_patch, "--top", "3"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "rank\tid\tlabel\tdistance"
    assert len(rows) == 4
    distances = [int(r.split("\t")[3]) for r in rows[1:]]
    assert distances == sorted(distances)
    assert main(["query", "--index", index, "--model", model, "--patch", query_patch, "--radius", "8"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 17

    reports = [str(run / "report.jsonl"), str(tmp_path / "again" / "report.jsonl")]
    for report in reports:
        assert main(["evaluate", "--index", index, "--model", model, "--data", data, "--out", report]) == 0
    first, second = (open(p, "rb").read() for p in reports)
    assert first == second
    assert os.path.exists(str(run / "report.timing.json"))
    assert os.path.exists(str(run / "pr_curve.svg"))
    config_keys = [line for line in first.decode().splitlines() if '"type":"config"' in line]
    assert len(config_keys) == len(tiny_config_keys(tiny_config_file))

    ablations = str(run / "ablations")
    assert main(["ablate", "--config", tiny_config_file, "--data", data, "--preset", "no-ca",
                 "--tsn", tsn, "--out", ablations]) == 0
    grid = pd.read_parquet(os.path.join(ablations, "ablation_no-ca.parquet"))
    assert list(grid["variant"]) == ["with-ca", "no-ca"]
    assert np.all((grid["map_at_t"] >= 0) & (grid["map_at_t"] <= 1))

    book = str(tmp_path / "results.xlsx")
    assert main(["export-workbook", "--results", str(run), "--out", book]) == 0
    sheets = load_workbook(book).sheetnames
    assert "no-ca" in sheets and "report metrics" in sheets and "tsn_losses" in sheets


def tiny_config_keys(path):
    with open(path, encoding="utf-8") as fh:
        return [line for line in fh if "=" in line]

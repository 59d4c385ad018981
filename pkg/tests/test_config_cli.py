import json
import subprocess
import sys

import pytest

from dipsep import cli
from dipsep import config as cfgmod
from dipsep.errors import ConfigError


# ------------------------------------------------------------------ config


def test_flatten_unflatten_roundtrip():
    d = {"a": 1, "b": {"c": 2, "d": {"e": [1, 2]}}, "f": {}}
    flat = cfgmod.flatten(d)
    assert flat == {"a": 1, "b.c": 2, "b.d.e": [1, 2], "f": {}}
    assert cfgmod.unflatten(flat) == d


def test_resolve_key():
    valid = ["lr", "mmd.alpha", "mmd.K", "nce.temperature", "frontend.dropout", "separator.dropout"]
    assert cfgmod.resolve_key("mmd.alpha", valid) == "mmd.alpha"
    assert cfgmod.resolve_key("alpha", valid) == "mmd.alpha"
    with pytest.raises(ConfigError, match="ambiguous"):
        cfgmod.resolve_key("dropout", valid)
    with pytest.raises(ConfigError, match="alpha"):
        cfgmod.resolve_key("alhpa", valid)


def test_parse_overrides():
    assert cfgmod.parse_overrides(["a=1", "b=x", "c=[1, 2]", "d=true"]) == {"a": 1, "b": "x", "c": [1, 2], "d": True}
    with pytest.raises(ConfigError):
        cfgmod.parse_overrides(["novalue"])


def test_load_config_precedence(tmp_path):
    defaults = {"lr": 0.1, "mmd": {"alpha": 10.0, "K": 100}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mmd": {"alpha": 3.0}}))
    assert cfgmod.load_config(path, {}, defaults) == {"lr": 0.1, "mmd": {"alpha": 3.0, "K": 100}}
    assert cfgmod.load_config(path, {"alpha": 0}, defaults)["mmd"]["alpha"] == 0
    assert cfgmod.load_config(None, None, defaults) == defaults


def test_file_values_verbatim(tmp_path):
    path = tmp_path / "c.json"
    body = {"lr": 0.5, "mmd": {"alpha": 1.5, "K": 7}}
    path.write_text(json.dumps(body))
    assert cfgmod.load_config(path, {}, {"lr": 0.1, "mmd": {"alpha": 10.0, "K": 100}}) == body


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        cfgmod.load_config(bad, {}, {})
    arr = tmp_path / "arr.json"
    arr.write_text("[1]")
    with pytest.raises(ConfigError):
        cfgmod.load_config(arr, {}, {})
    with pytest.raises(ConfigError):
        cfgmod.load_config(tmp_path / "missing.json", {}, {})
    unknown = tmp_path / "u.json"
    unknown.write_text(json.dumps({"alhpa": 1}))
    with pytest.raises(ConfigError, match="did you mean 'alpha'"):
        cfgmod.load_config(unknown, {}, {"mmd": {"alpha": 1.0}})


# --------------------------------------------------------------------- CLI


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("argv", [
    ["--help"], ["simulate", "--help"], ["pretrain", "--help"], ["train-sep", "--help"],
    ["separate", "--help"], ["evaluate", "--help"], ["analyze", "--help"], ["analyze", "mi-bound", "--help"],
])
def test_help_everywhere(argv, capsys):
    code, out, _ = _run(argv, capsys)
    assert code == 0
    assert "--" in out and "usage:" in out


def test_version(capsys):
    code, out, _ = _run(["--version"], capsys)
    assert code == 0 and out.startswith("dipsep ")


def test_mi_bound_command(tmp_path, capsys):
    out = tmp_path / "mi"
    code, _, err = _run(["analyze", "mi-bound", "--num-systems", "10", "--seed", "1", "--out-dir", str(out)], capsys)
    assert code == 0, err
    report = json.loads((out / "mi_bound_report.json").read_text())
    assert report
    meta = json.loads((out / "metadata.json").read_text())
    for key in ("artifact_version", "seed", "start_time", "end_time", "kernel_backend"):
        assert key in meta
    assert meta["seed"] == 1
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved == {"num_systems": 10, "seed": 1}


def test_out_dir_needs_force(tmp_path, capsys):
    argv = ["analyze", "mi-bound", "--num-systems", "5", "--out-dir", str(tmp_path / "r")]
    assert _run(argv, capsys)[0] == 0
    code, _, err = _run(argv, capsys)
    assert code == 2 and "--force" in err
    assert _run(argv + ["--force"], capsys)[0] == 0


def test_rerun_from_config_resolved(tmp_path, capsys):
    a = tmp_path / "a"
    assert _run(["analyze", "mi-bound", "--num-systems", "20", "--seed", "4", "--out-dir", str(a)], capsys)[0] == 0
    b = tmp_path / "b"
    assert _run(["analyze", "mi-bound", "--config", str(a / "config.resolved"), "--out-dir", str(b)], capsys)[0] == 0
    assert (a / "mi_bound_report.json").read_bytes() == (b / "mi_bound_report.json").read_bytes()


def test_misspelled_flag_suggests(tmp_path, capsys):
    code, _, err = _run(["pretrain", "--real-manifest", "r", "--syn-manifest", "s", "--out-dir", str(tmp_path),
                         "--alhpa", "1"], capsys)
    assert code == 2
    assert "--alpha" in err


def test_unknown_set_key_suggests(tmp_path, capsys):
    code, _, err = _run(["analyze", "mi-bound", "--set", "num_sytems=3", "--out-dir", str(tmp_path / "x")], capsys)
    assert code == 2 and "num_systems" in err


def test_missing_manifest_names_flag(tmp_path, capsys):
    code, _, err = _run(["pretrain", "--real-manifest", str(tmp_path / "nope.jsonl"), "--syn-manifest",
                         str(tmp_path / "nope2.jsonl"), "--out-dir", str(tmp_path / "o")], capsys)
    assert code == 3
    assert "--real-manifest" in err


def test_missing_required_flag_is_usage_error(capsys):
    code, _, err = _run(["pretrain", "--syn-manifest", "s"], capsys)
    assert code == 2 and "--real-manifest" in err


def test_bad_num_systems(tmp_path, capsys):
    code, _, err = _run(["analyze", "mi-bound", "--num-systems", "0", "--out-dir", str(tmp_path / "z")], capsys)
    assert code == 2 and "num-systems" in err


def test_alpha_flag_overrides_config_file(tiny_corpus, tmp_path, capsys):
    conf = tmp_path / "p.json"
    conf.write_text(json.dumps({"mmd": {"alpha": 10.0}, "max_epochs": 1, "crop_seconds": 0.5}))
    out = tmp_path / "pre"
    code, _, err = _run(["pretrain", "--preset", "toy", "--config", str(conf), "--alpha", "0",
                         "--real-manifest", str(tiny_corpus["root"] / "real" / "manifest.jsonl"),
                         "--syn-manifest", str(tiny_corpus["root"] / "synthetic" / "manifest.jsonl"),
                         "--out-dir", str(out)], capsys)
    assert code == 0, err
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved["mmd"]["alpha"] == 0
    assert resolved["max_epochs"] == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs_run"] == 1


def test_full_pipeline_reproducible(tiny_corpus, tmp_path, capsys):
    root = tiny_corpus["root"]
    sim = tmp_path / "sim"
    assert _run(["simulate", "--sources-dir", str(root / "sources"), "--num-mixtures", "4", "--seed", "2",
                 "--out-dir", str(sim)], capsys)[0] == 0
    from dipsep.mixkit import Manifest

    assert len(Manifest.load(sim / "manifest.jsonl")) == 4

    pre = tmp_path / "pre"
    code, _, err = _run(["pretrain", "--preset", "toy", "--max-epochs", "1", "--set", "crop_seconds=0.5",
                         "--real-manifest", str(root / "real" / "manifest.jsonl"),
                         "--syn-manifest", str(root / "synthetic" / "manifest.jsonl"), "--out-dir", str(pre)], capsys)
    assert code == 0, err
    front = pre / "checkpoint_best.pt"

    sep = tmp_path / "sep"
    sep_args = ["train-sep", "--frontend", str(front), "--train-manifest", str(sim / "manifest.jsonl"),
                "--max-steps", "2", "--max-epochs", "1", "--set", "crop_seconds=0.5",
                "--set", "separator.tcn_blocks=1", "--set", "separator.tcn_repeats=1"]
    code, _, err = _run(sep_args + ["--out-dir", str(sep)], capsys)
    assert code == 0, err
    sep_ckpt = sep / "separator_best.pt"

    mix = root / "eval_a"
    first = sorted(mix.glob("*.wav"))[0]
    sout = tmp_path / "sout"
    code, _, err = _run(["separate", "--frontend", str(front), "--separator", str(sep_ckpt), "--in", str(first),
                         "--out-dir", str(sout)], capsys)
    assert code == 0, err
    assert (sout / "s1.wav").exists() and (sout / "s2.wav").exists()

    rep = tmp_path / "ev" / "report.json"
    code, _, err = _run(["evaluate", "--frontend", str(front), "--separator", str(sep_ckpt), "--test-manifest",
                         str(root / "eval_b" / "manifest.jsonl"), "--report", str(rep), "--hist",
                         str(tmp_path / "ev" / "hist.csv")], capsys)
    assert code == 0, err
    report = json.loads(rep.read_text())
    assert report["aggregate"]["num_utterances"] == len(tiny_corpus["eval_b"])
    assert (tmp_path / "ev" / "hist.csv").read_text().startswith("bin_low_db,bin_high_db,count")

    # the same commands again from each config.resolved give identical artifacts
    pre2 = tmp_path / "pre2"
    assert _run(["pretrain", "--preset", "toy", "--config", str(pre / "config.resolved"),
                 "--real-manifest", str(root / "real" / "manifest.jsonl"),
                 "--syn-manifest", str(root / "synthetic" / "manifest.jsonl"), "--out-dir", str(pre2)], capsys)[0] == 0
    assert (pre2 / "checkpoint_best.pt").read_bytes() == front.read_bytes()
    assert (pre2 / "metrics.jsonl").read_bytes() == (pre / "metrics.jsonl").read_bytes()
    sep2 = tmp_path / "sep2"
    assert _run(["train-sep", "--frontend", str(front), "--train-manifest", str(sim / "manifest.jsonl"),
                 "--config", str(sep / "config.resolved"), "--out-dir", str(sep2)], capsys)[0] == 0
    assert (sep2 / "separator_best.pt").read_bytes() == sep_ckpt.read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dipsep", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pretrain" in res.stdout

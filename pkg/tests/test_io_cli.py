import json

import numpy as np
import pytest

from shortv import LayerPlan, ToySpec, logits_last, monotone_profile
from shortv.cli import main
from shortv.errors import InputError
from shortv.io import load_weights, read_jsonl, save_weights, write_jsonl
from shortv.model import ModelConfig


@pytest.fixture
def toy_files(tmp_path):
    spec = ToySpec(ModelConfig(4, 8, 16, 2, 11), 3, monotone_profile(4))
    (tmp_path / "spec.json").write_text(json.dumps(spec.to_json()))
    assert main(["gen-toy", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "w.bin")]) == 0
    assert main(["gen-calib", "--spec", str(tmp_path / "spec.json"), "--n", "6", "--t", "2,4",
                 "--v", "2,5", "--out", str(tmp_path / "calib.jsonl")]) == 0
    return tmp_path, spec


def test_weights_round_trip(tmp_path, small_weights, small_calib):
    save_weights(small_weights, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.config == small_weights.config
    for seq in small_calib:
        assert np.array_equal(logits_last(seq, back), logits_last(seq, small_weights))


def test_weight_file_layout(tmp_path, small_weights):
    path = tmp_path / "w.bin"
    save_weights(small_weights, path)
    raw = path.read_bytes()
    n = int.from_bytes(raw[:8], "little")
    manifest = json.loads(raw[8:8 + n])
    assert manifest["config"]["num_layers"] == 4
    first = manifest["tensors"][0]
    assert first["name"] == "embedding" and first["offset"] == 0
    data = np.frombuffer(raw[8 + n:8 + n + first["nbytes"]], "<f4").reshape(first["shape"])
    assert np.array_equal(data, small_weights.embedding)


def test_bad_weight_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00nope!")
    with pytest.raises(InputError):
        load_weights(tmp_path / "x.bin")


def test_jsonl_round_trip(tmp_path, small_calib):
    write_jsonl(small_calib, tmp_path / "c.jsonl")
    back = read_jsonl(tmp_path / "c.jsonl")
    assert [s.is_visual.tolist() for s in back] == [s.is_visual.tolist() for s in small_calib]
    first = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(first) == {"positions"} and "text" in first["positions"][-1]


def test_jsonl_requires_text_last(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"positions": [{"text": 1}, {"visual": [0, 1]}]}\n')
    with pytest.raises(InputError):
        read_jsonl(tmp_path / "bad.jsonl")


def test_flops_ratio_cli(capsys):
    assert main(["flops", "--L", "32", "--N", "19", "--t", "64", "--v", "576",
                 "--h", "4096", "--m", "11008"]) == 0
    r = float(capsys.readouterr().out.strip())
    assert 0.545 <= r <= 0.555


def test_flops_schedule_cli(tmp_path, capsys):
    (tmp_path / "plan.json").write_text(json.dumps(LayerPlan.with_frozen(4, [3]).to_json()))
    assert main(["flops", "--schedule", str(tmp_path / "plan.json"), "--t", "2", "--v", "3",
                 "--h", "4", "--m", "8", "--vtw", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert [l["flops"] for l in rep["layers"]] == [2000, 2000, 704, 704]  # 2*2*40*4 + 4*4*4


def test_pipeline(toy_files, capsys):
    d, _ = toy_files
    assert main(["profile", "--weights", str(d / "w.bin"), "--calib", str(d / "calib.jsonl"),
                 "--out", str(d / "lc.json"), "--csv", str(d / "lc.csv")]) == 0
    rep = json.loads((d / "lc.json").read_text())
    assert rep["scores"]["visual"][-1] == 0.0 and rep["n_samples"] == 6
    assert (d / "lc.csv").read_text().startswith("layer,class,metric,score,n_samples")

    assert main(["select", "--report", str(d / "lc.json"), "--n", "0", "--out", str(d / "p0.json")]) == 0
    assert LayerPlan.from_json(json.loads((d / "p0.json").read_text())) == LayerPlan.dense(4)
    assert main(["select", "--report", str(d / "lc.json"), "--n", "2", "--out", str(d / "p2.json")]) == 0
    plan = json.loads((d / "p2.json").read_text())
    assert plan["n_frozen"] == 2 and plan["layers"][3]["kind"] == "frozen"

    runs = {}
    for name in ("p0", "p2"):
        assert main(["run", "--weights", str(d / "w.bin"), "--plan", str(d / f"{name}.json"),
                     "--input", str(d / "calib.jsonl"), "--fastv", "1,0.5",
                     "--out", str(d / f"run_{name}.json")]) == 0
        runs[name] = json.loads((d / f"run_{name}.json").read_text())
    r = runs["p2"]["runs"][0]
    assert r["crosscheck"]["gap"] == 0
    assert r["prune_events"][0]["after_layer"] == 1
    assert r["flops"]["ratio"] < runs["p0"]["runs"][0]["flops"]["ratio"]

    assert main(["run", "--weights", str(d / "w.bin"), "--input", str(d / "calib.jsonl"),
                 "--out", str(d / "vanilla.json")]) == 0
    assert main(["run", "--weights", str(d / "w.bin"), "--plan", str(d / "p0.json"),
                 "--input", str(d / "calib.jsonl"), "--out", str(d / "n0.json")]) == 0
    a = json.loads((d / "vanilla.json").read_text())["runs"]
    b = json.loads((d / "n0.json").read_text())["runs"]
    assert [x["logits"] for x in a] == [x["logits"] for x in b]

    assert main(["profile", "--weights", str(d / "w.bin"), "--calib", str(d / "calib.jsonl"),
                 "--metric", "cosine", "--classes", "visual", "--threads", "2",
                 "--out", str(d / "cos.json")]) == 0
    assert json.loads((d / "cos.json").read_text())["metric"] == "cosine"

    assert main(["ablate", "--weights", str(d / "w.bin"), "--calib", str(d / "calib.jsonl"),
                 "--n", "2", "--trials", "3", "--out", str(d / "ab.json")]) == 0
    ab = json.loads((d / "ab.json").read_text())
    assert len(ab["random"]) == 3 and ab["n"] == 2

    assert main(["bench", "--weights", str(d / "w.bin"), "--plan", str(d / "p2.json"),
                 "--calib", str(d / "calib.jsonl"), "--repeat", "1", "--out", str(d / "b.json")]) == 0
    assert json.loads((d / "b.json").read_text())["speedup"] > 0


def test_gen_is_deterministic(toy_files):
    d, _ = toy_files
    main(["gen-toy", "--spec", str(d / "spec.json"), "--out", str(d / "w2.bin")])
    main(["gen-calib", "--spec", str(d / "spec.json"), "--n", "6", "--t", "2,4", "--v", "2,5",
          "--out", str(d / "c2.jsonl")])
    assert (d / "w.bin").read_bytes() == (d / "w2.bin").read_bytes()
    assert (d / "calib.jsonl").read_text() == (d / "c2.jsonl").read_text()


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_usage_error(capsys):
    assert main(["flops", "--bogus"]) == 2
    assert _err(capsys)["exit_code"] == 2
    assert main(["flops", "--L", "3"]) == 2


def test_data_error(tmp_path, capsys):
    assert main(["profile", "--weights", str(tmp_path / "missing.bin"),
                 "--calib", str(tmp_path / "c.jsonl")]) == 3
    err = _err(capsys)
    assert err["exit_code"] == 3 and err["error"]


def test_schedule_violation(toy_files, capsys):
    d, _ = toy_files
    assert main(["run", "--weights", str(d / "w.bin"), "--input", str(d / "calib.jsonl"),
                 "--vtw", "9"]) == 3
    assert _err(capsys)["error"] == "ScheduleError"

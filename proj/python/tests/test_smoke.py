import json
import math
import os
import pathlib

import pytest

import tpolab

FIXTURES = pathlib.Path(
    os.environ.get("TPO_FIXTURE_DIR", pathlib.Path(__file__).resolve().parents[2] / "tests" / "fixtures")
)


def test_identities():
    # Chosen and gold coincide: TPO with alpha = 1 reduces to CPO.
    a = tpolab.record_loss("tpo", -3.0, -3.0, -5.0, alpha=1.0, beta=0.7)
    b = tpolab.record_loss("cpo", -3.0, -3.0, -5.0, alpha=0.0, beta=0.7)
    assert abs(a - b) <= 1e-12
    d = tpolab.record_loss("dpo", -1.0, -2.0, -4.0, beta=0.3, chosen_ref=-2.0, rejected_ref=-4.0)
    assert abs(d - math.log(2.0)) <= 1e-12


def test_gradient_signs():
    g, c, r = tpolab.tpo_gradient(-2.0, -2.0, 1.0, 1.0)
    assert g == -1.0
    assert c == pytest.approx(-0.5)
    assert r == pytest.approx(0.5)


def test_bad_method_raises():
    with pytest.raises(ValueError):
        tpolab.record_loss("ppo", 0.0, 0.0, 0.0)


def test_schedule():
    assert tpolab.lr_at(10, 100, 1.0, 0.1) == 1.0
    assert tpolab.lr_at(5, 100, 1.0, 0.1) == pytest.approx(0.5)


def test_train_and_evaluate():
    data = tpolab.synthetic("increment", 200, 0)
    assert len(data.splitlines()) == 200
    run = tpolab.train(data, "tpo", 0)
    assert run == tpolab.train(data, "tpo", 0)
    report = json.loads(tpolab.evaluate(run["policy"], tpolab.synthetic("increment", 100, 1)))
    assert report["accuracy"] >= 0.9


def test_noise_involution():
    data = tpolab.synthetic("alternate", 50, 2)
    flipped = tpolab.inject_noise(data, 1.0, 3)
    assert flipped != data
    assert tpolab.inject_noise(flipped, 1.0, 4) == data


def test_gradcheck():
    assert tpolab.gradcheck("tpo", 1) <= 1e-5


def test_cli_build_data(tmp_path):
    out = tmp_path / "triples.jsonl"
    code, stdout, _ = tpolab.run_cli(
        ["build-data", "--rule", "base", "--in", str(FIXTURES / "base10_sources.jsonl"), "--out", str(out)]
    )
    assert code == 0
    assert json.loads(stdout)["emitted"] == 7
    assert out.read_bytes() == (FIXTURES / "base10_expected.jsonl").read_bytes()
    code, _, err = tpolab.run_cli(["train"])
    assert code == 1
    assert "error" in err

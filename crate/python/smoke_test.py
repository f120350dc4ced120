"""Smoke test for the cforge_py extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python

then run `python python/smoke_test.py` or `pytest python/`.
"""

import json
import tempfile
import urllib.request

import cforge_py as cf


def test_filter_rules():
    src = cf.AttributeVector(30)
    tf = cf.AttributeVector(31, {"glasses": True})
    assert cf.rejection_reasons(src, tf, "glasses") == []

    tf = cf.AttributeVector(31, {"glasses": True, "smile": True})
    assert cf.rejection_reasons(src, tf, "glasses") == ["SPECIFICITY_VIOLATION(smile)"]

    with_glasses = cf.AttributeVector(30, {"glasses": True})
    reasons = cf.rejection_reasons(with_glasses, tf, "glasses", distorted=True)
    assert reasons[:2] == ["DISTORTED", "SOURCE_HAS_ATTRIBUTE"]

    old = cf.AttributeVector(40)
    assert cf.rejection_reasons(src, old, "old") == []
    assert "AGE_CHANGE_INSUFFICIENT" in cf.rejection_reasons(src, cf.AttributeVector(35), "old")


def test_matrix():
    m = cf.TransitionMatrix.default()
    assert m.get("sunglasses", "glasses") == -2
    assert m.get("facemask", "smile") == 0
    assert m.get("glasses", "smile") == -1
    assert not m.allows("glasses", "smile", False, True)
    strict = cf.TransitionMatrix.strict()
    strict.set("glasses", "smile", -2)
    again = cf.TransitionMatrix.from_csv(strict.to_csv())
    assert again.get("glasses", "smile") == -2
    src = cf.AttributeVector(30)
    tf = cf.AttributeVector(30, {"glasses": True, "smile": True})
    assert cf.rejection_reasons(src, tf, "glasses", matrix=cf.TransitionMatrix.default()) != []


def test_statistics():
    assert cf.recall_threshold([0.1, 0.5, 0.9, 1.3], 0.5) == 0.9
    mean, half = cf.mean_ci([0.1, 0.2, 0.3, 0.4], 0.999)
    assert abs(mean - 0.25) < 1e-12 and half > 0
    assert cf.mean_ci([0.5, 0.5], 0.999) == (0.5, 0.0)
    assert abs(cf.t_critical(0.95, 10) - 2.2281388519649385) < 1e-9
    assert cf.sig2(0.012345) == "0.012"


def test_detector_wire_format():
    flags = {a: False for a in cf.attributes() if a not in ("old", "young")}
    tf = dict(flags, scarf=True)
    raw = "Here you go:\n```json\n" + cf.render_attribute_response(flags, tf) + "\n```"
    s, t = cf.parse_attribute_response(raw)
    assert s == flags and t == tf
    assert cf.render_prompt("Ada Lee") == "A photo of the face of Ada Lee"


def test_mock_server_protocol():
    with cf.MockServer(seed=5) as server:
        body = json.dumps({"prompt": cf.render_prompt("Bo Chen"), "seed": 1}).encode()
        req = urllib.request.Request(
            server.base_url + "/v1/txt2img", data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req) as resp:
            reply = json.load(resp)
        assert len(reply["image_ref"]) == 64


def test_pipeline_on_mock():
    config = json.dumps(
        {
            "generation": {"identities_per_demographic": 1, "variations_per_identity": 1},
            "training": {"names_per_demographic": 2},
            "filter": {"require_identity_validation": False},
        }
    )
    with tempfile.TemporaryDirectory() as run_dir:
        run = cf.Pipeline(run_dir, config, mock=True, seed=3)
        plan = run.plan()
        assert plan["source_jobs"] == 8 and plan["edit_jobs"] == 8 * 19
        assert run.generate()["completed"] == 8
        run.edit()
        run.detect()
        run.calibrate()
        summary = run.filter()
        accepted = run.accepted_pairs()
        assert summary["totals"]["accepted"] == len(accepted) > 0
        assert len(run) > 8 + 152

        try:
            cf.Pipeline(run_dir, '{"bogus": 1}', mock=True)
        except cf.ConfigError:
            pass
        else:
            raise AssertionError("unknown config field accepted")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")

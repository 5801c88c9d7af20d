import json
import math

import numpy as np
import pytest
from conftest import TINY_CONFIG

from spatialsep.config import RunConfig
from spatialsep.errors import DataError, NumericalError
from spatialsep.model import SeparationModel
from spatialsep.train import Example, Trainer, load_examples, make_batch, step_rng, train


def _cfg(**training):
    d = json.loads(json.dumps(TINY_CONFIG))
    d["training"].update(training)
    return RunConfig.from_dict(d)


def test_load_examples(dataset):
    _, _, manifest = dataset
    exs = load_examples(manifest)
    assert len(exs) == 3
    for ex in exs:
        assert ex.mixture.shape[0] == 6 and ex.references.shape[0] == 2
        assert ex.mixture.shape[1] == ex.references.shape[1]
        assert 0 <= ex.angle_diff_deg <= 180


def test_load_examples_missing_file(dataset, tmp_path):
    _, data_dir, manifest = dataset
    lines = open(manifest).read().splitlines()
    entry = json.loads(lines[0])
    entry["mixture_path"] = "nope.wav"
    bad = tmp_path / "m.jsonl"
    bad.write_text(json.dumps(entry) + "\n")
    with pytest.raises(DataError, match="missing"):
        load_examples(bad)


def test_make_batch_pads_short_examples():
    short = Example("s", np.ones((6, 30)), np.ones((2, 30)))
    long = Example("l", np.arange(600.0)[None].repeat(6, 0), np.zeros((2, 600)))
    mix, refs, valid = make_batch([short], 2, 100, step_rng(0, 0))
    assert mix.shape == (2, 6, 100) and list(valid) == [30, 30]
    np.testing.assert_array_equal(mix[:, :, 30:], 0.0)
    mix, _, valid = make_batch([long], 3, 100, step_rng(0, 1))
    assert list(valid) == [100] * 3
    for b in range(3):
        start = int(mix[b, 0, 0])
        np.testing.assert_array_equal(mix[b, 0], np.arange(start, start + 100))


def test_step_rng_is_keyed_by_seed_and_step():
    a = step_rng(5, 3).integers(0, 2**31, 4)
    assert np.array_equal(a, step_rng(5, 3).integers(0, 2**31, 4))
    assert not np.array_equal(a, step_rng(5, 4).integers(0, 2**31, 4))
    assert not np.array_equal(a, step_rng(6, 3).integers(0, 2**31, 4))


def test_padded_loss_ignores_padding():
    """The loss of a padded batch equals the loss on the unpadded examples."""
    rng = np.random.default_rng(0)
    exs = [Example("a", rng.standard_normal((6, 700)) * 0.1, rng.standard_normal((2, 700)) * 0.1)]
    trainer = Trainer(_cfg(chunk_seconds=0.0625, batch_size=1), exs)  # 1000-sample chunks
    mix, refs, valid = make_batch(exs, 1, trainer.chunk, step_rng(0, 0))
    assert valid[0] == 700
    padded = trainer.loss_on_batch(mix, refs, valid).value
    est = trainer.model.forward(mix, training=True)["estimates"].value[0]
    from spatialsep.metrics import pit_loss
    expected, _ = pit_loss(est[:, :700], exs[0].references, mode="train")
    assert padded == pytest.approx(expected, abs=1e-10)


def test_step_is_deterministic(dataset):
    exs = load_examples(dataset[2])
    a = Trainer(_cfg(), exs, seed=7).step()
    b = Trainer(_cfg(), exs, seed=7).step()
    assert a == b
    assert set(a) == {"step", "loss", "grad_norm", "lr"}
    c = Trainer(_cfg(), exs, seed=8).step()
    assert c["loss"] != a["loss"]


def test_resume_is_bitwise_identical(dataset, tmp_path):
    exs = load_examples(dataset[2])
    straight = Trainer(_cfg(), exs, seed=3)
    for _ in range(3):
        straight.step()
    after = straight.step()

    first = Trainer(_cfg(), exs, seed=3)
    for _ in range(3):
        first.step()
    first.save(tmp_path / "ck")
    resumed = Trainer.resume(tmp_path / "ck", exs)
    assert resumed.step_count == 3
    assert resumed.step() == after
    for name, p in straight.model.params.items():
        assert p.value.tobytes() == resumed.model.params[name].value.tobytes()


def test_fixed_w2_unchanged_by_training(dataset):
    d = json.loads(json.dumps(TINY_CONFIG))
    d["features"]["w2_mode"] = "fix -1"
    trainer = Trainer(RunConfig.from_dict(d), load_examples(dataset[2]))
    k_before = trainer.model.params["icd.K"].value.copy()
    for _ in range(2):
        trainer.step()
    np.testing.assert_array_equal(trainer.model.params["icd.w2"].value, -1.0)
    assert not np.array_equal(trainer.model.params["icd.K"].value, k_before)


def test_nan_input_is_a_data_error(dataset):
    exs = load_examples(dataset[2])
    trainer = Trainer(_cfg(), [Example("bad", np.full_like(exs[0].mixture, np.nan), exs[0].references)])
    with pytest.raises(DataError):
        trainer.step()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_parameters_raise_numerical_error(dataset, tmp_path):
    exs = load_examples(dataset[2])
    trainer = Trainer(_cfg(), exs)
    trainer.step()
    trainer.save(tmp_path / "ck")
    trainer.model.params["encoder.basis"].value[:] = np.inf
    with pytest.raises(NumericalError, match="step 2"):
        trainer.step()
    # The checkpoint written before the failure is still loadable.
    model, header, _ = SeparationModel.load(tmp_path / "ck")
    assert header["step"] == 1


def test_train_writes_log_checkpoints_and_probe(dataset, tmp_path):
    _, _, manifest = dataset
    out = tmp_path / "model.ckpt"
    trainer = train(_cfg(), manifest, out, dev_manifest=manifest)
    assert trainer.step_count == 4
    records = [json.loads(line) for line in open(f"{out}.log.jsonl")]
    steps = [r for r in records if "loss" in r]
    assert [r["step"] for r in steps] == [1, 2, 3, 4]
    assert all(math.isfinite(r["loss"]) and r["lr"] > 0 for r in steps)
    probes = [r for r in records if "probe_si_sdri" in r]
    assert [r["step"] for r in probes] == [2, 4]
    assert sum("eval" in r for r in records) == 2
    _, header, _ = SeparationModel.load(out)
    assert header["step"] == 4
    assert header["probe"]["si_sdri"] == probes[-1]["probe_si_sdri"]
    assert header["probe"]["id"] == trainer.examples[0].id


def test_train_resume_appends_log(dataset, tmp_path):
    _, _, manifest = dataset
    out = tmp_path / "m.ckpt"
    train(_cfg(), manifest, out, steps=2)
    train(None, manifest, out, resume=out, steps=4)
    steps = [json.loads(line)["step"] for line in open(f"{out}.log.jsonl") if '"loss"' in line]
    assert steps == [1, 2, 3, 4]
    ref = tmp_path / "ref.ckpt"
    train(_cfg(), manifest, ref, steps=4)
    a, _, _ = SeparationModel.load(out)
    b, _, _ = SeparationModel.load(ref)
    for name, p in a.params.items():
        assert p.value.tobytes() == b.params[name].value.tobytes()

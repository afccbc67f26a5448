# Copyright 2026 The dschat Authors
# SPDX-License-Identifier: Apache-2.0

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

import dschat


def small_config(head=dschat.HeadKind.LM, vocab=dschat.VOCAB):
    c = dschat.ModelConfig()
    c.n_layers, c.n_heads, c.d_model, c.d_ff = 2, 2, 16, 32
    c.vocab_size, c.max_seq_len, c.head = vocab, 32, head
    return c


def test_tokenizer_round_trip():
    text = "héllo, wörld \U0001F600"
    ids = dschat.tokenize(text)
    assert ids[0] == ord("h") + 4
    assert dschat.detokenize(ids).decode("utf-8") == text
    assert dschat.detokenize([dschat.BOS, 72 + 4, dschat.EOS]) == b"H"


def test_forward_shapes_and_generation():
    m = dschat.TransformerModel(small_config(), 3)
    logits = m.forward(np.array([[1, 10, 11, 12], [1, 20, 21, 22]]))
    assert logits.shape == (2, 4, dschat.VOCAB)
    tokens, logprobs, _ = dschat.generate(m, [1, 10, 11], 6)
    assert 1 <= len(tokens) <= 6
    assert all(lp <= 0 for lp in logprobs)
    # greedy first token is the argmax of the full forward
    full = m.forward(np.array([1, 10, 11]))
    assert tokens[0] == int(np.argmax(full[0, -1]))
    assert dschat.generate(m, [1, 10, 11], 6) == (tokens, logprobs, _)


def test_scalar_model_and_checkpoint(tmp_path):
    rm = dschat.TransformerModel(small_config(dschat.HeadKind.Scalar), 5)
    values = rm.forward(np.array([1, 30, 31, 32]))
    assert values.shape == (1, 4)
    assert rm.score([1, 30, 31, 32]) == pytest.approx(values[0, -1])
    path = tmp_path / "rm.dsc"
    dschat.save_checkpoint(rm, str(path))
    back = dschat.load_checkpoint(str(path))
    assert back.config == rm.config
    assert back.values() == rm.values()
    path.write_bytes(b"nope" + path.read_bytes()[4:])
    with pytest.raises(dschat.BadMagicError):
        dschat.load_checkpoint(str(path))
    with pytest.raises(dschat.Error):
        dschat.model_preset("gpt-9")


def test_pipeline_math():
    assert dschat.pairwise_loss([0.0], [0.0]) == pytest.approx(math.log(2), abs=1e-12)
    adv, ret = dschat.gae([0, 0, 1], [0.5, 0.5, 0.5], 1.0, 1.0)
    assert adv == pytest.approx([0.5, 0.5, 0.5])
    assert ret == pytest.approx([1, 1, 1])
    r = dschat.compute_rewards([-1, -1, -1], [-1, -1, -1], 9.0, length=3)
    assert r == pytest.approx([0, 0, 5])
    assert dschat.ppo_actor_loss([math.log(2) - 1], [-1], [1]) == pytest.approx(-1.2, abs=1e-6)
    assert dschat.ppo_actor_loss([-math.log(2) - 1], [-1], [-1]) == pytest.approx(0.8, abs=1e-6)


def test_ema_closed_form():
    ema = dschat.TransformerModel(small_config(), 1)
    actor = dschat.TransformerModel(small_config(), 2)
    e0 = np.concatenate([np.array(v) for v in ema.values()])
    a = np.concatenate([np.array(v) for v in actor.values()])
    for _ in range(10):
        dschat.ema_update(ema, actor, 0.9)
    after = np.concatenate([np.array(v) for v in ema.values()])
    want = 0.9**10 * e0 + (1 - 0.9**10) * a
    assert np.max(np.abs(after - want)) < 1e-6


def test_data_blend_and_split():
    a = [dschat.Record(f"a{i}", "x", "y", "a") for i in range(10)]
    b = [dschat.Record(f"b{i}", "x", "y", "b") for i in range(30)]
    out = dschat.blend([a, b], [1.0, 3.0], seed=4, target=40)
    assert sum(r.source == "a" for r in out) == 10
    s0, s1, s2 = dschat.split_stages(out, (0.2, 0.4, 0.4), 1)
    assert sorted(s0 + s1 + s2) == list(range(40))
    with pytest.raises(dschat.ParseError, match="line 1"):
        dschat.parse_dataset('{"prompt": ""}\n')


def test_perf_model():
    w = dschat.perf.workload_preset("opt-13b")
    assert abs(dschat.perf.gen_flop_fraction(w) - 0.20) <= 0.03
    assert dschat.perf.cost_for_hours(1.25, 64, 4.0) == pytest.approx(320)
    hw = dschat.perf.hardware_preset("A100-40GB")
    points, knee, knees = dschat.perf.scaling_curve(w, hw, [8, 16, 32, 64])
    assert (knee, knees) == (16, 1)
    assert points[0].batch_per_gpu >= 1
    assert dschat.perf.max_feasible_model(80e9) == "opt-13b"
    assert not dschat.perf.feasible_single_gpu(6.7e9, 32e9)


def test_train_end_to_end(tmp_path):
    rows = [
        json.dumps({"prompt": f"Question {i % 5}?", "chosen": f"Answer {i % 3}.", "rejected": "no"})
        for i in range(40)
    ]
    data = tmp_path / "pairs.jsonl"
    data.write_text("\n".join(rows) + "\n")
    cfg = {
        "datasets": [str(data)],
        "sft": {"epochs": 1, "max_len": 32},
        "rm": {"epochs": 1, "max_len": 32},
        "ppo": {"batch": 4, "prompt_len": 16, "gen_len": 4, "iterations": 2},
    }
    report = dschat.train(json.dumps(cfg), str(tmp_path / "out"))
    assert [s for s, _ in report["stages"]] == ["Step 1 (SFT)", "Step 2 (RM)", "Step 3 (PPO)"]
    assert len(report["ppo_rm_scores"]) == 2
    actor = dschat.load_checkpoint(str(tmp_path / "out" / "actor_final.dsc"))
    reply = dschat.chat_respond(actor, "Human: hi\nAssistant: ", max_new=4)
    assert isinstance(reply, str)

    cfg["datasets"] = [str(tmp_path / "missing.jsonl")]
    with pytest.raises(dschat.StageError, match=r"\[stage setup\]"):
        dschat.train(json.dumps(cfg), str(tmp_path / "out2"))
    with pytest.raises(dschat.ConfigError):
        dschat.train(json.dumps({"unknown": 1}))

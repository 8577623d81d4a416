"""Model container tests: assembly, cache budgeting, checkpoint integrity."""

import json

import numpy as np
import pytest

import hybridforge.numkernel as nk
from hybridforge.attention import (
    KIND_MHA,
    KIND_MLA,
    KIND_MAMBA2,
    MLAConfig,
    ModelConfig,
)
from hybridforge.compose import (
    CheckpointError,
    HybridModel,
    assemble,
    build_model,
    convert_model,
    kv_report,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from hybridforge.smart import HybridLayout
from hybridforge.ssm import SsmState


def toy_cfg(**kw):
    base = dict(L=4, d=16, n_h=4, n_kv=2, d_h=4, vocab=32)
    base.update(kw)
    return ModelConfig(**base)


def toy_mcfg():
    return MLAConfig(r_q=8, r_kv=6, d_qk=2, d_v=4, d_r=2)


def converted_pair(dtype=np.float64, seed=3):
    cfg = toy_cfg()
    mcfg = toy_mcfg()
    teacher = build_model(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(60)
    teacher.head.data[...] = (rng.normal(size=teacher.head.shape) * 0.3).astype(dtype)
    return teacher, convert_model(teacher, KIND_MLA, mcfg), convert_model(teacher, KIND_MAMBA2)


# -- construction ----------------------------------------------------------------


def test_build_model_flat_logits_at_init():
    model = build_model(toy_cfg(), seed=0)
    ids = np.arange(10) % 32
    logits = model.forward(ids)
    assert np.all(logits.data == 0.0)  # zero head: every token starts uniform


def test_build_model_honors_layer_kinds():
    kinds = [KIND_MHA, KIND_MLA, KIND_MAMBA2, KIND_MLA]
    model = build_model(toy_cfg(layer_kinds=kinds), toy_mcfg(), seed=1)
    assert model.cfg.layer_kinds == kinds
    logits = model.forward(np.arange(6))
    assert logits.shape == (6, 32)


def test_named_tensor_order_and_param_count():
    model = build_model(toy_cfg(), seed=0)
    names = [n for n, _ in model.named_tensors()]
    assert names[0] == "embed"
    assert names[-1] == "head"
    assert names[1] == "layers.0.norm1"
    assert len(names) == len(set(names))
    assert model.param_count() == sum(t.data.size for _, t in model.named_tensors())


def test_kind_mixer_mismatch_rejected():
    model = build_model(toy_cfg(), seed=0)
    bad_cfg = toy_cfg(layer_kinds=[KIND_MAMBA2] + [KIND_MHA] * 3)
    with pytest.raises(ValueError):
        HybridModel(cfg=bad_cfg, mcfg=None, embed=model.embed, layers=model.layers,
                    final_norm=model.final_norm, head=model.head)


def test_clone_is_independent():
    model = build_model(toy_cfg(), seed=0)
    twin = model.clone()
    twin.embed.data[0, 0] += 1.0
    assert model.embed.data[0, 0] != twin.embed.data[0, 0]


def test_astype_converts_every_tensor():
    model = build_model(toy_cfg(), seed=0, dtype=np.float32)
    wide = model.astype(np.float64)
    assert all(t.dtype == np.float64 for _, t in wide.named_tensors())
    assert all(t.dtype == np.float32 for _, t in model.named_tensors())


# -- conversion -------------------------------------------------------------------


def test_convert_shares_non_mixer_parameters():
    teacher, mla, mamba = converted_pair()
    for student in (mla, mamba):
        assert np.array_equal(student.embed.data, teacher.embed.data)
        assert np.array_equal(student.head.data, teacher.head.data)
        for lt, ls in zip(teacher.layers, student.layers):
            assert np.array_equal(ls.norm1.data, lt.norm1.data)
            assert np.array_equal(ls.mlp_down.data, lt.mlp_down.data)
    assert all(k == KIND_MLA for k in mla.cfg.layer_kinds)
    assert all(k == KIND_MAMBA2 for k in mamba.cfg.layer_kinds)


def test_convert_random_arm_differs_from_structured():
    teacher, mla, _ = converted_pair()
    scramble = convert_model(teacher, KIND_MLA, toy_mcfg(), random_seed=5)
    assert not np.allclose(scramble.layers[0].mixer.W_DQ.data,
                           mla.layers[0].mixer.W_DQ.data)
    again = convert_model(teacher, KIND_MLA, toy_mcfg(), random_seed=5)
    assert np.array_equal(scramble.layers[0].mixer.W_DQ.data,
                          again.layers[0].mixer.W_DQ.data)


def test_convert_input_validation():
    teacher, mla, _ = converted_pair()
    with pytest.raises(ValueError):
        convert_model(teacher, KIND_MHA)
    with pytest.raises(ValueError):
        convert_model(teacher, KIND_MLA)  # missing latent shape config
    with pytest.raises(ValueError):
        convert_model(mla, KIND_MAMBA2)  # source must be all-attention


# -- hybrid assembly -----------------------------------------------------------------


def test_assemble_full_layout_equals_mla_source():
    _, mla, mamba = converted_pair()
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 1, 2, 3]))
    ids = np.arange(8) % 32
    assert np.array_equal(hybrid.forward(ids).data, mla.forward(ids).data)
    assert hybrid.cfg.layer_kinds == [KIND_MLA] * 4


def test_assemble_empty_layout_equals_mamba_source():
    _, mla, mamba = converted_pair()
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[]))
    ids = np.arange(8) % 32
    assert np.array_equal(hybrid.forward(ids).data, mamba.forward(ids).data)
    assert hybrid.cfg.layer_kinds == [KIND_MAMBA2] * 4


def test_assemble_partial_layout_kind_pattern():
    _, mla, mamba = converted_pair()
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 2]))
    assert hybrid.cfg.layer_kinds == [KIND_MLA, KIND_MAMBA2, KIND_MLA, KIND_MAMBA2]
    assert np.array_equal(hybrid.layers[0].mixer.W_DQ.data, mla.layers[0].mixer.W_DQ.data)
    assert np.array_equal(hybrid.layers[1].mixer.W_x.data, mamba.layers[1].mixer.W_x.data)


def test_assemble_warns_on_shared_divergence():
    _, mla, mamba = converted_pair()
    mamba.embed.data[0, 0] += 0.5
    with pytest.warns(RuntimeWarning):
        hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 3]))
    # attention-side value wins
    assert hybrid.embed.data[0, 0] == mla.embed.data[0, 0]


def test_assemble_input_validation():
    teacher, mla, mamba = converted_pair()
    with pytest.raises(ValueError):
        assemble(mamba, mla, HybridLayout(mla_indices=[0]))  # sources swapped
    with pytest.raises(ValueError):
        assemble(mla, teacher, HybridLayout(mla_indices=[0]))
    with pytest.raises(ValueError):
        assemble(mla, mamba, HybridLayout(mla_indices=[0, 7]))  # out of range
    other = convert_model(build_model(toy_cfg(vocab=64), seed=0, dtype=np.float64),
                          KIND_MAMBA2)
    with pytest.raises(ValueError):
        assemble(mla, other, HybridLayout(mla_indices=[0]))


def test_assembled_hybrid_cached_decode_matches_full():
    _, mla, mamba = converted_pair()
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 2]))
    ids = np.arange(12) % 32
    full = hybrid.forward(ids).data
    caches = hybrid.init_caches(np.float64)
    out1, caches = hybrid.forward_cached(ids[:7], caches)
    parts = [out1.data]
    for t in range(7, 12):
        step, caches = hybrid.forward_cached(ids[t : t + 1], caches)
        parts.append(step.data)
    assert np.abs(np.concatenate(parts) - full).max() < 1e-5


# -- cache budget report ----------------------------------------------------------

# published per-model cache footprints: (L, d, n_h, n_kv, d_h, r_q, r_kv,
# d_qk, d_r, retained layer indices, percent of the all-attention baseline)
PUBLISHED_BUDGETS = [
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32,
     [0, 2, 4, 6, 8, 10, 12, 14], 7.81),
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32,
     [0, 2, 5, 8, 11, 14], 5.86),
    (16, 2048, 32, 8, 64, 1344, 128, 32, 32,
     [0, 5, 10, 14], 3.91),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64,
     [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 27], 4.69),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64,
     [0, 4, 8, 12, 16, 20, 24, 27], 2.68),
    (28, 3072, 24, 8, 128, 1536, 128, 64, 64,
     [0, 5, 11, 17, 22, 27], 2.01),
    (32, 4096, 32, 8, 128, 2048, 160, 64, 64,
     [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 31], 5.47),
    (32, 4096, 32, 8, 128, 2048, 160, 64, 64,
     [0, 4, 8, 13, 18, 23, 27, 31], 2.73),
]


@pytest.mark.parametrize("row", PUBLISHED_BUDGETS, ids=lambda r: f"L{r[0]}-N{len(r[9])}")
def test_kv_report_published_percentages(row):
    L, d, n_h, n_kv, d_h, r_q, r_kv, d_qk, d_r, indices, want = row
    cfg = ModelConfig(L=L, d=d, n_h=n_h, n_kv=n_kv, d_h=d_h, vocab=256)
    mcfg = MLAConfig(r_q=r_q, r_kv=r_kv, d_qk=d_qk, d_v=d_h, d_r=d_r)
    report = kv_report(cfg, HybridLayout(mla_indices=indices), mcfg, t=2048)
    assert abs(report["percent_of_baseline"] - want) <= 0.01


def test_kv_report_percent_invariant_to_t_and_width():
    cfg = toy_cfg()
    mcfg = toy_mcfg()
    layout = HybridLayout(mla_indices=[0, 3])
    base = kv_report(cfg, layout, mcfg, t=128)["percent_of_baseline"]
    assert kv_report(cfg, layout, mcfg, t=4096)["percent_of_baseline"] == base
    assert kv_report(cfg, layout, mcfg, t=128, elem_bytes=8)["percent_of_baseline"] == base


def test_kv_report_bytes_and_kinds():
    cfg = toy_cfg()
    mcfg = toy_mcfg()
    report = kv_report(cfg, HybridLayout(mla_indices=[1]), mcfg, t=10, elem_bytes=4)
    assert report["layer_kinds"] == [KIND_MAMBA2, KIND_MLA, KIND_MAMBA2, KIND_MAMBA2]
    assert report["per_layer_bytes"] == [0, (6 + 2) * 10 * 4, 0, 0]
    assert report["total_kv_bytes"] == 320
    assert report["baseline_kv_bytes"] == 4 * 2 * 2 * 4 * 10 * 4
    with pytest.raises(ValueError):
        kv_report(cfg, HybridLayout(mla_indices=[1]), mcfg, t=0)


def test_kv_report_pure_ssm_is_zero_percent():
    report = kv_report(toy_cfg(), HybridLayout(mla_indices=[]), toy_mcfg(), t=64)
    assert report["total_kv_bytes"] == 0
    assert report["percent_of_baseline"] == 0.0
    assert report["ssm_state_bytes"] > 0


def test_kv_report_ssm_state_matches_live_states():
    _, mla, mamba = converted_pair(dtype=np.float32)
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 2]))
    report = kv_report(hybrid.cfg, HybridLayout(mla_indices=[0, 2]), hybrid.mcfg, t=5)
    per_state = SsmState.empty(hybrid.layers[1].mixer, np.float32).byte_size()
    assert report["ssm_state_bytes"] == 2 * per_state


def test_kv_report_matches_live_cache_growth():
    _, mla, mamba = converted_pair(dtype=np.float32)
    hybrid = assemble(mla, mamba, HybridLayout(mla_indices=[0, 2]))
    t = 9
    caches = hybrid.init_caches(np.float32)
    with nk.no_grad():
        _, caches = hybrid.forward_cached(np.arange(t) % 32, caches)
    kv, ssm = hybrid.cache_bytes(caches)
    report = kv_report(hybrid.cfg, HybridLayout(mla_indices=[0, 2]), hybrid.mcfg, t=t)
    assert kv == report["total_kv_bytes"]
    assert ssm == report["ssm_state_bytes"]


# -- checkpoints --------------------------------------------------------------------


def hybrid_model():
    _, mla, mamba = converted_pair(dtype=np.float32)
    return assemble(mla, mamba, HybridLayout(mla_indices=[0, 2]))


def test_checkpoint_round_trip_every_tensor(tmp_path):
    model = hybrid_model()
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(model, path)
    again = load_checkpoint(path)
    assert again.cfg == model.cfg
    assert again.mcfg == model.mcfg
    for (name, a), (_, b) in zip(model.named_tensors(), again.named_tensors()):
        assert a.dtype == b.dtype, name
        assert np.array_equal(a.data, b.data), name
    ids = np.arange(6) % 32
    assert np.array_equal(model.forward(ids).data, again.forward(ids).data)


def test_checkpoint_bytes_stable_across_cycles(tmp_path):
    model = build_model(toy_cfg(), seed=4)  # attention kind included
    p1, p2, p3 = (str(tmp_path / f"m{i}.hfrg") for i in range(3))
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    save_checkpoint(load_checkpoint(p2), p3)
    b1, b2, b3 = (open(p, "rb").read() for p in (p1, p2, p3))
    assert b1 == b2 == b3


def test_checkpoint_header_only_read(tmp_path):
    model = hybrid_model()
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(model, path)
    header = read_checkpoint_header(path)
    assert ModelConfig(**header["cfg"]) == model.cfg
    assert MLAConfig(**header["mcfg"]) == model.mcfg
    names = [e["name"] for e in header["tensors"]]
    assert names == [n for n, _ in model.named_tensors()]
    for entry in header["tensors"]:
        assert entry["offset"] % 64 == 0


def test_checkpoint_detects_payload_corruption(tmp_path):
    model = hybrid_model()
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(model, path)
    blob = bytearray(open(path, "rb").read())
    header = read_checkpoint_header(path)
    hlen = int(np.frombuffer(bytes(blob[8:16]), dtype="<u8")[0])
    payload_start = 16 + hlen
    target = payload_start + header["tensors"][3]["offset"]
    blob[target] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(hybrid_model(), path)
    blob = bytearray(open(path, "rb").read())
    blob[0] = ord(b"X")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(hybrid_model(), path)
    blob = bytearray(open(path, "rb").read())
    blob[4:8] = np.array([99], dtype="<u4").tobytes()
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(hybrid_model(), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:40])  # cut inside the header
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)


def write_fake(path, tensors):
    header = json.dumps({"tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(b"HFRG")
        f.write(np.array([1], dtype="<u4").tobytes())
        f.write(np.array([len(header)], dtype="<u8").tobytes())
        f.write(header)


def test_directory_validation(tmp_path):
    path = str(tmp_path / "fake.hfrg")
    write_fake(path, [{"name": "a", "dtype": "int8", "shape": [2],
                       "offset": 0, "nbytes": 2, "crc32": 0}])
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)
    write_fake(path, [{"name": "a", "dtype": "float32", "shape": [2],
                       "offset": 0, "nbytes": 4, "crc32": 0}])
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)
    write_fake(path, [
        {"name": "a", "dtype": "float32", "shape": [4], "offset": 0, "nbytes": 16, "crc32": 0},
        {"name": "b", "dtype": "float32", "shape": [4], "offset": 8, "nbytes": 16, "crc32": 0},
    ])
    with pytest.raises(CheckpointError):
        read_checkpoint_header(path)


def test_checkpoint_missing_tensor(tmp_path):
    model = hybrid_model()
    path = str(tmp_path / "model.hfrg")
    save_checkpoint(model, path)
    with open(path, "rb") as f:
        f.read(4)
        version = f.read(4)
        hlen = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        header = json.loads(f.read(hlen))
        payload = f.read()
    header["tensors"] = [e for e in header["tensors"] if e["name"] != "embed"]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"HFRG")
        f.write(version)
        f.write(np.array([len(blob)], dtype="<u8").tobytes())
        f.write(blob)
        f.write(payload)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

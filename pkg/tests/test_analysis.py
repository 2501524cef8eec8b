import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import hand_flops, singular_values_via_eigen

from conftest import tiny_config
from ifvit.analysis import (
    OP_CLASSES, average_attention, collect_attention, count_flops, emit_reports, read_pgm,
    singular_spectrum, spectrum_report, text_to_image_block, trim_border, write_pgm,
)
from ifvit.backbone import AttentionRecord, ModelConfig, build_model, forward, param_count
from ifvit.errors import ArgumentError, DataError
from ifvit.numerics import RngState

SETTINGS = [("early", "concat"), ("intermediate", "concat"), ("early", "crossattn"), ("intermediate", "crossattn")]
TABLE_GFLOPS = {  # reported values
    ("early", "concat"): 29.56, ("intermediate", "concat"): 25.84,
    ("early", "crossattn"): 23.82, ("intermediate", "crossattn"): 23.66,
}
FROZEN = {  # weight layers only / with attention matmuls
    ("early", "concat"): (29_004_398_592, 31_974_465_536),
    ("intermediate", "concat"): (25_613_303_808, 27_849_926_656),
    ("early", "crossattn"): (23_756_275_712, 26_041_626_624),
    ("intermediate", "crossattn"): (23_594_795_008, 25_568_065_536),
}


def paper_config(fusion, conditioning, n_image=4, n_text=1, **kw):
    if fusion == "early":
        n_image = n_text = 0
    return ModelConfig(fusion=fusion, conditioning=conditioning, n_image=n_image, n_text=n_text, **kw)


def record(matrix, grid, kind="self", text_len=0, time=True, layer=1, steps=1):
    """A 2-D record laid out as [time?, text?, image]."""
    part, cursor = {}, 0
    if time:
        part["time"] = (0, 1)
        cursor = 1
    if text_len:
        part["text"] = (cursor, cursor + text_len)
        cursor += text_len
    part["image"] = (cursor, cursor + grid * grid)
    m = np.asarray(matrix, dtype=np.float64)
    return AttentionRecord(layer, kind, m, part, dict(part), grid, steps, tuple(range(steps)))


def cross_record(matrix, grid, layer=2):
    q = {"time": (0, 1), "image": (1, 1 + grid * grid)}
    return AttentionRecord(layer, "cross", np.asarray(matrix, np.float64), q, {"text": (0, matrix.shape[-1])}, grid)


def stochastic(shape, seed):
    a = np.random.default_rng(seed).random(shape) + 1e-3
    return a / a.sum(axis=-1, keepdims=True)


class TestFlops:
    @pytest.mark.parametrize("s", SETTINGS, ids=lambda s: "-".join(s))
    def test_matches_table_within_five_percent(self, s):
        got = count_flops(paper_config(*s)).gflops
        assert abs(got - TABLE_GFLOPS[s]) / TABLE_GFLOPS[s] <= 0.05

    @pytest.mark.parametrize("s", SETTINGS, ids=lambda s: "-".join(s))
    @pytest.mark.parametrize("attn", [False, True])
    def test_frozen_totals(self, s, attn):
        assert count_flops(paper_config(*s), attention_matmuls=attn).total == FROZEN[s][attn]

    @pytest.mark.parametrize("s", SETTINGS, ids=lambda s: "-".join(s))
    @pytest.mark.parametrize("attn", [False, True])
    def test_hand_oracle(self, s, attn):
        assert count_flops(paper_config(*s), attention_matmuls=attn).total == hand_flops(*s, attention_matmuls=attn)

    @pytest.mark.parametrize("s", SETTINGS, ids=lambda s: "-".join(s))
    def test_additive_and_nonnegative(self, s):
        rep = count_flops(paper_config(*s), attention_matmuls=True)
        assert rep.total == sum(e.flops for e in rep.entries)
        assert rep.total == sum(rep.by_branch.values()) == sum(rep.by_class.values())
        assert all(e.flops >= 0 and e.op_class in OP_CLASSES for e in rep.entries)

    def test_pure(self):
        cfg = paper_config("intermediate", "crossattn")
        assert count_flops(cfg).entries == count_flops(cfg).entries
        assert param_count(cfg) == param_count(cfg)

    @pytest.mark.parametrize("depth", [3, 5, 9, 13])
    @pytest.mark.parametrize("attn", [False, True])
    def test_intermediate_concat_cheaper_than_early(self, depth, attn):
        early = count_flops(paper_config("early", "concat", depth=depth), attn).total
        mid = count_flops(paper_config("intermediate", "concat", depth=depth, n_image=1, n_text=0), attn).total
        assert mid < early

    def test_matmul_class_only_when_requested(self):
        cfg = paper_config("early", "crossattn")
        assert count_flops(cfg).by_class["attention-matmul"] == 0
        assert count_flops(cfg, True).by_class["attention-matmul"] > 0

    def test_text_branch_accounting(self):
        rep = count_flops(paper_config("early", "concat"))
        assert rep.by_branch["text"] == 2 * 77 * 768 * 512

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(SETTINGS), st.integers(1, 6), st.sampled_from([1, 2, 4]), st.booleans())
    def test_oracle_on_random_configs(self, s, half_depth, p, attn):
        depth = 2 * half_depth + 1
        n_image = min(1, half_depth) if s[0] == "intermediate" else 0
        cfg = paper_config(*s, depth=depth, patch_size=p, embed_dim=64, heads=4,
                           n_image=n_image, n_text=1 if n_image else 0)
        want = hand_flops(*s, attention_matmuls=attn, D=depth, d=64, p=p, n_image=n_image, n_text=1 if n_image else 0)
        assert count_flops(cfg, attn).total == want


class TestAverageAttention:
    def test_identical_records(self):
        m = stochastic((5, 5), 0)
        out = average_attention([record(m, 2), record(m, 2)])
        assert len(out) == 1 and np.allclose(out[0].matrix, m) and out[0].n_timesteps == 2

    def test_midpoint(self):
        a, b = stochastic((5, 5), 0), stochastic((5, 5), 1)
        (out,) = average_attention([record(a, 2), record(b, 2)])
        assert np.allclose(out.matrix, (a + b) / 2)

    def test_averages_batch_and_heads(self):
        m = stochastic((3, 2, 5, 5), 4)
        (out,) = average_attention([record(m, 2)])
        assert out.matrix.shape == (5, 5) and np.allclose(out.matrix, m.mean(axis=(0, 1)))

    def test_weighted_by_timesteps(self):
        a, b = stochastic((5, 5), 0), stochastic((5, 5), 1)
        (out,) = average_attention([record(a, 2, steps=3), record(b, 2, steps=1)])
        assert np.allclose(out.matrix, 0.75 * a + 0.25 * b)

    def test_groups_per_layer_and_kind(self):
        recs = [record(stochastic((5, 5), i), 2, layer=i % 2 + 1) for i in range(4)]
        recs.append(cross_record(stochastic((5, 3), 9), 2, layer=1))
        out = average_attention(recs)
        assert [(r.layer_index, r.kind) for r in out] == [(1, "cross"), (1, "self"), (2, "self")]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_rows_remain_stochastic(self, n, seed):
        recs = [record(stochastic((2, 10, 10), seed + i), 3) for i in range(n)]
        (out,) = average_attention(recs)
        assert np.allclose(out.matrix.sum(axis=1), 1.0, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(DataError, match="shape"):
            average_attention([record(stochastic((5, 5), 0), 2), record(stochastic((10, 10), 0), 3)])

    def test_partition_mismatch(self):
        a = record(stochastic((5, 5), 0), 2)
        b = record(stochastic((5, 5), 0), 2, time=False, text_len=1)
        with pytest.raises(DataError, match="partition"):
            average_attention([a, b])


class TestTrimBorder:
    def test_four_by_four_keeps_center_block(self):
        m = stochastic((17, 17), 0)
        out = trim_border(record(m, 4))
        assert out.grid == 2 and out.matrix.shape == (5, 5)
        kept = [0] + [1 + i for i in (5, 6, 9, 10)]
        expected = m[np.ix_(kept, kept)]
        assert np.allclose(out.matrix, expected / expected.sum(axis=1, keepdims=True))
        assert out.query_partition == {"time": (0, 1), "image": (1, 5)}

    def test_three_by_three_keeps_center(self):
        out = trim_border(record(stochastic((10, 10), 1), 3, time=True))
        assert out.matrix.shape == (2, 2) and out.query_partition["image"] == (1, 2)

    @pytest.mark.parametrize("grid", [1, 2])
    def test_no_interior(self, grid):
        with pytest.raises(ArgumentError, match="interior"):
            trim_border(record(stochastic((grid * grid + 1,) * 2, 0), grid))

    def test_text_keys_kept(self):
        m = stochastic((1 + 8 + 16, 1 + 8 + 16), 2)
        out = trim_border(record(m, 4, text_len=8))
        assert out.matrix.shape == (13, 13) and out.key_partition["text"] == (1, 9)

    def test_cross_columns_untouched(self):
        m = stochastic((26, 8), 3)
        out = trim_border(cross_record(m, 5))
        assert out.matrix.shape == (10, 8) and out.key_partition == {"text": (0, 8)}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(3, 7), st.integers(0, 10_000))
    def test_rows_resum_to_one(self, grid, seed):
        n = 1 + 4 + grid * grid
        out = trim_border(record(stochastic((n, n), seed), grid, text_len=4))
        assert np.allclose(out.matrix.sum(axis=1), 1.0, atol=1e-6)
        assert out.matrix.shape == (n - (4 * grid - 4),) * 2

    def test_requires_averaged_record(self):
        with pytest.raises(ArgumentError, match="2-D"):
            trim_border(record(stochastic((2, 10, 10), 0), 3))


class TestTextToImageBlock:
    def test_concat(self):
        m = stochastic((1 + 8 + 16, 1 + 8 + 16), 0)
        block = text_to_image_block(trim_border(record(m, 4, text_len=8)))
        assert block.shape == (4, 8)

    def test_cross(self):
        block = text_to_image_block(trim_border(cross_record(stochastic((17, 8), 0), 4)))
        assert block.shape == (4, 8)

    def test_slices_partition(self):
        m = np.arange(25 * 25, dtype=np.float64).reshape(25, 25)
        block = text_to_image_block(record(m, 4, text_len=8))
        assert np.array_equal(block, m[9:25, 1:9])

    def test_image_only_block(self):
        with pytest.raises(ArgumentError, match="no text keys"):
            text_to_image_block(record(stochastic((17, 17), 0), 4))


class TestSpectrum:
    def test_uniform_attention_is_rank_one(self):
        block = np.full((36, 8), 1 / 8)
        s = singular_spectrum(block, k=8)
        assert s[0] == pytest.approx(np.sqrt(36 / 8), rel=1e-12)
        assert s[1] < 1e-9

    @pytest.mark.parametrize("counts", [(4, 0, 0, 0), (2, 2, 0, 0), (3, 1, 5, 0), (1, 1, 1, 1)])
    def test_one_hot_rows(self, counts):
        rows = [np.eye(4)[j] for j, c in enumerate(counts) for _ in range(c)]
        s = singular_spectrum(np.array(rows), k=4)
        assert np.allclose(s, np.sqrt(sorted(counts, reverse=True)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_oracle(self, seed):
        block = stochastic((16, 8), seed)
        assert np.allclose(singular_spectrum(block, 8), singular_values_via_eigen(block), atol=1e-8)

    def test_k_too_large(self):
        with pytest.raises(ArgumentError):
            singular_spectrum(np.ones((4, 3)), k=4)

    def test_report_from_model(self, schedule):
        model = build_model(tiny_config("early", "concat", img_size=16), RngState(3))
        ids = np.full((2, 8), 4, dtype=np.int64)
        _, recs = collect_attention(model, schedule, ids, n_steps=4, rng=RngState(0))
        averaged = average_attention(recs)
        assert all(r.n_timesteps == 4 for r in averaged)
        rep = spectrum_report(averaged, k=10)
        assert rep.layers == [1, 2, 3, 4, 5] and rep.trim_width == 1
        for vals in rep.values:
            assert len(vals) == 4
            vals = np.asarray(vals)
            assert np.all(vals >= 0) and np.all(np.diff(vals) <= 1e-12)

    def test_report_skips_image_only(self):
        recs = [record(stochastic((17, 17), 0), 4), cross_record(stochastic((17, 8), 0), 4, layer=3)]
        rep = spectrum_report(recs)
        assert rep.layers == [3] and rep.kinds == ["cross"]


class TestEmitReports:
    def test_flops_rows(self, tmp_path):
        full = count_flops(paper_config("early", "concat"))
        rep = dataclasses.replace(full, entries=full.entries[:3])
        (path,) = emit_reports(tmp_path, flops=rep)
        lines = open(path).read().splitlines()
        assert lines[0] == "site,block,op_class,flops" and len(lines) == 4

    def test_spectrum_rows(self, tmp_path):
        recs = [cross_record(stochastic((17, 8), i), 4, layer=i) for i in (2, 3)]
        (path,) = emit_reports(tmp_path, spectrum=spectrum_report(recs))
        lines = open(path).read().splitlines()
        assert lines[0] == "layer,order,sigma" and len(lines) == 1 + 2 * 4
        assert lines[1].startswith("2,1,")

    def test_reemit_byte_identical(self, tmp_path):
        recs = average_attention([cross_record(stochastic((17, 8), 0), 4)])
        kwargs = dict(flops=count_flops(paper_config("intermediate", "crossattn")),
                      spectrum=spectrum_report(recs), averaged=recs)
        first = emit_reports(tmp_path / "a", **kwargs)
        second = emit_reports(tmp_path / "b", **kwargs)
        assert len(first) == 3
        for p, q in zip(first, second):
            assert open(p, "rb").read() == open(q, "rb").read()

    def test_pgm_dimensions(self, tmp_path):
        m = stochastic((7, 3), 0)
        write_pgm(tmp_path / "m.pgm", m)
        img = read_pgm(tmp_path / "m.pgm")
        assert img.shape == (7, 3) and img.max() == 255

    def test_pgm_rejects_batched(self, tmp_path):
        with pytest.raises(ArgumentError):
            write_pgm(tmp_path / "m.pgm", np.ones((2, 2, 2)))

    def test_unwritable_path_named(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_reports(blocker / "sub", flops=count_flops(paper_config("early", "concat")))


class TestCapturedRecordsEndToEnd:
    def test_concat_block_shapes(self):
        model = build_model(tiny_config("early", "concat", img_size=16), RngState(1))
        ids = np.full((2, 8), 5, dtype=np.int64)
        _, recs = forward(model, np.zeros((2, 3, 16, 16), np.float32), np.array([3, 7]),
                          model.encode_text(ids), capture=True)
        (avg,) = average_attention(recs[:1])
        assert text_to_image_block(trim_border(avg)).shape == (4, 8)

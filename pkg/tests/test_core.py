import json

import numpy as np
import pytest

from trackmill.core import (
    Dataset,
    FrameRecord,
    NoiseRates,
    Tracklet,
    load_manifest,
    make_tracklet,
    read_sidecar,
    save_manifest,
    write_sidecar,
)
from trackmill.exceptions import ConfigError, IntegrityError, ManifestParseError


def random_dataset(seed, n_tracklets=100, dim=8, with_missing=False):
    rng = np.random.default_rng(seed)
    tracklets = []
    for i in range(n_tracklets):
        length = int(rng.integers(1, 12))
        pids = [int(p) for p in rng.integers(0, 30, size=length)]
        if with_missing and i % 7 == 0:
            pids = [None] * length
        emb = rng.standard_normal((length, dim)).astype(np.float32)
        tracklets.append(make_tracklet(f"t{i}", int(rng.integers(0, 4)), pids, embeddings=emb))
    return Dataset(tuple(tracklets))


class TestRecords:
    def test_frame_requires_content(self):
        with pytest.raises(IntegrityError):
            FrameRecord("t", 0, 0, gt_pid=1)

    def test_embedding_is_read_only_float32(self):
        fr = FrameRecord("t", 0, 0, embedding=[1.0, 2.0])
        assert fr.embedding.dtype == np.float32
        with pytest.raises(ValueError):
            fr.embedding[0] = 5.0

    def test_tracklet_seq_must_be_dense(self):
        frames = (FrameRecord("t", 0, 0, 1, image_ref="a"), FrameRecord("t", 2, 0, 1, image_ref="b"))
        with pytest.raises(IntegrityError, match="dense"):
            Tracklet("t", 0, frames)

    def test_tracklet_single_camera(self):
        frames = (FrameRecord("t", 0, 0, 1, image_ref="a"), FrameRecord("t", 1, 1, 1, image_ref="b"))
        with pytest.raises(IntegrityError, match="camera"):
            Tracklet("t", 0, frames)

    def test_dataset_rejects_duplicate_ids(self):
        t = make_tracklet("a", 0, [1, 1])
        with pytest.raises(IntegrityError):
            Dataset((t, t))

    def test_dataset_rejects_mixed_dimensions(self):
        a = make_tracklet("a", 0, [1], embeddings=np.ones((1, 3)))
        b = make_tracklet("b", 0, [1], embeddings=np.ones((1, 4)))
        with pytest.raises(IntegrityError):
            Dataset((a, b))

    def test_from_frames_renumbers(self):
        t = make_tracklet("a", 0, [1, 2, 3])
        moved = Tracklet.from_frames("b", 0, reversed(t.frames))
        assert [fr.seq for fr in moved.frames] == [0, 1, 2]
        assert moved.pids == [3, 2, 1]
        assert all(fr.tracklet_id == "b" for fr in moved.frames)

    def test_embedding_matrix_and_offsets(self):
        ds = random_dataset(0, n_tracklets=5)
        m = ds.embedding_matrix()
        assert m.shape == (ds.n_frames, 8)
        for i, t in enumerate(ds.tracklets):
            np.testing.assert_array_equal(m[ds.offsets[i] : ds.offsets[i + 1]], t.embeddings())

    def test_with_embeddings_shape_checked(self):
        ds = random_dataset(0, n_tracklets=3)
        with pytest.raises(IntegrityError):
            ds.with_embeddings(np.zeros((ds.n_frames + 1, 8)))

    def test_noise_rates_validated(self):
        with pytest.raises(ConfigError):
            NoiseRates(0.5, 1.0)
        with pytest.raises(ConfigError):
            NoiseRates(1.0, float("inf"))


class TestManifest:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_manifest(p).n_tracklets == 0

    def test_single_tracklet(self, tmp_path):
        p = tmp_path / "one.jsonl"
        lines = [{"t": "x", "s": s, "pid": 7, "cam": 0, "img": f"i{s}"} for s in range(3)]
        p.write_text("\n".join(json.dumps(o) for o in lines))
        ds = load_manifest(p)
        assert ds.n_tracklets == 1 and ds.ids == {7}

    def test_empty_dataset_writes_header_only(self, tmp_path):
        p = tmp_path / "e.jsonl"
        save_manifest(Dataset(()), p)
        lines = p.read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["format"] == "trackmill-manifest"
        assert load_manifest(p) == Dataset(())

    @pytest.mark.parametrize("seed", range(3))
    def test_round_trip_bit_equal(self, tmp_path, seed):
        ds = random_dataset(seed, with_missing=True)
        p = tmp_path / "ds.jsonl"
        save_manifest(ds, p)
        back = load_manifest(p)
        assert back == ds
        np.testing.assert_array_equal(back.embedding_matrix(), ds.embedding_matrix())

    def test_missing_pids_preserved(self, tmp_path):
        ds = Dataset((make_tracklet("a", 0, [None, None]),))
        p = tmp_path / "m.jsonl"
        save_manifest(ds, p)
        assert load_manifest(p).tracklets[0].pids == [None, None]

    def test_sidecar_round_trip(self, tmp_path):
        ds = random_dataset(4, n_tracklets=20)
        p = tmp_path / "side.jsonl"
        save_manifest(ds, p, sidecar=True)
        assert (tmp_path / "side.jsonl.emb.bin").exists()
        assert '"emb":null' in p.read_text().splitlines()[1]
        assert load_manifest(p) == ds

    def test_sidecar_header_checked(self, tmp_path):
        p = tmp_path / "x.bin"
        write_sidecar(np.ones((2, 3)), p)
        np.testing.assert_array_equal(read_sidecar(p), np.ones((2, 3), dtype=np.float32))
        p.write_bytes(b"BADMAGIC" + p.read_bytes()[8:])
        with pytest.raises(ManifestParseError, match="magic"):
            read_sidecar(p)

    def test_frames_may_be_out_of_order(self, tmp_path):
        p = tmp_path / "o.jsonl"
        lines = [{"t": "x", "s": s, "pid": s, "cam": 1, "img": "i"} for s in (2, 0, 1)]
        p.write_text("\n".join(json.dumps(o) for o in lines))
        assert load_manifest(p).tracklets[0].pids == [0, 1, 2]

    def test_parse_error_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"t":"a","s":0,"cam":0,"img":"i"}\n{not json}\n')
        with pytest.raises(ManifestParseError) as info:
            load_manifest(p)
        assert info.value.line == 2

    def test_wrong_field_type(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"t":"a","s":"zero","cam":0,"img":"i"}\n')
        with pytest.raises(ManifestParseError, match="'s'"):
            load_manifest(p)

    def test_duplicate_frame_rejected(self, tmp_path):
        p = tmp_path / "dup.jsonl"
        p.write_text('{"t":"a","s":0,"cam":0,"img":"i"}\n{"t":"a","s":0,"cam":0,"img":"j"}\n')
        with pytest.raises(IntegrityError, match="duplicate"):
            load_manifest(p)

    def test_gap_in_seq_rejected(self, tmp_path):
        p = tmp_path / "gap.jsonl"
        p.write_text('{"t":"a","s":0,"cam":0,"img":"i"}\n{"t":"a","s":2,"cam":0,"img":"j"}\n')
        with pytest.raises(IntegrityError):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")

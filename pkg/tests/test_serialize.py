import json
import zipfile

import numpy as np
import pytest

from batchgp import gp
from batchgp.policy import act_numpy, make_policy
from batchgp.serialize import (VERSION, FormatError, file_kind, load_ensemble, load_policy, save_ensemble,
                               save_policy)


def test_ensemble_round_trip_predicts_identically(small_ensemble, tmp_path):
    path = tmp_path / "m.bgp"
    save_ensemble(small_ensemble, path)
    ens = load_ensemble(path)
    Xs = np.random.default_rng(0).standard_normal((7, small_ensemble.d))
    for m in range(small_ensemble.p):
        a = gp.predict(small_ensemble.caches[m], small_ensemble.models[m], Xs)
        b = gp.predict(ens.caches[m], ens.models[m], Xs)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_array_equal(small_ensemble.caches[m].root, ens.caches[m].root)
    np.testing.assert_array_equal(ens.normalizer.mean, small_ensemble.normalizer.mean)
    assert ens.dt == small_ensemble.dt
    assert file_kind(path) == "gp_ensemble"


def test_files_are_byte_identical(small_ensemble, tmp_path):
    save_ensemble(small_ensemble, tmp_path / "a")
    save_ensemble(small_ensemble, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    pol = make_policy(2, 1, seed=4)
    save_policy(pol, tmp_path / "p", small_ensemble.normalizer, goal=[0.0, 0.0])
    save_policy(pol, tmp_path / "q", small_ensemble.normalizer, goal=[0.0, 0.0])
    assert (tmp_path / "p").read_bytes() == (tmp_path / "q").read_bytes()


def test_policy_round_trip(small_ensemble, tmp_path):
    pol = make_policy(2, 1, (5, 3), goal_conditioned=True, seed=7)
    save_policy(pol, tmp_path / "p", small_ensemble.normalizer)
    bundle = load_policy(tmp_path / "p")
    np.testing.assert_array_equal(bundle.policy.to_flat(), pol.to_flat())
    assert bundle.policy.layer_sizes == pol.layer_sizes
    assert bundle.policy.goal_conditioned and bundle.goal is None
    s = np.array([[0.3, -0.2]])
    np.testing.assert_array_equal(act_numpy(bundle.policy, s, s), act_numpy(pol, s, s))
    bare = tmp_path / "bare"
    save_policy(pol, bare)
    assert load_policy(bare).normalizer is None


def _rewrite_meta(src, dst, **changes):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for name in zin.namelist():
            data = zin.read(name)
            if name == "meta.json":
                meta = json.loads(data)
                meta.update(changes)
                data = json.dumps(meta).encode()
            zout.writestr(name, data)


def test_refuses_other_versions_and_kinds(tmp_path):
    save_policy(make_policy(2, 1), tmp_path / "p")
    _rewrite_meta(tmp_path / "p", tmp_path / "v", version=VERSION + 1)
    with pytest.raises(FormatError, match="version"):
        load_policy(tmp_path / "v")
    with pytest.raises(FormatError, match="expected 'gp_ensemble'"):
        load_ensemble(tmp_path / "p")
    _rewrite_meta(tmp_path / "p", tmp_path / "f", format="other")
    with pytest.raises(FormatError):
        load_policy(tmp_path / "f")
    (tmp_path / "junk").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_policy(tmp_path / "junk")

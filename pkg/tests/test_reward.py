import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from binderflow.denoiser.field import TargetContext
from binderflow.reward import (
    IPAE_MAX,
    ExternalScorer,
    RewardConfigError,
    RewardSpec,
    RewardTerm,
    com_placement_reward,
    contact_count_reward,
    evaluate_reward,
    normalize_reward,
    proxy_ipae,
    raw_components,
)


def line_target(n=5, hot=(2,)):
    pts = np.stack([np.arange(n) * 4.0, np.zeros(n), np.zeros(n)], axis=1)
    flags = np.zeros(n, dtype=bool)
    flags[list(hot)] = True
    return TargetContext(pts, flags)


class TestProxyIpae:
    def test_zero_on_hotspots(self):
        ctx = line_target(hot=(1, 2, 3))
        assert proxy_ipae(ctx.hotspots, ctx) == 0.0

    def test_ceiling_without_interface(self):
        ctx = line_target()
        far = np.array([[0.0, 50.0, 0.0], [1.0, 60.0, 0.0]])
        assert proxy_ipae(far, ctx) == IPAE_MAX

    def test_hand_value(self):
        # hotspot at x=8; interface points at distances 3 and 5, the third point is out of range
        ctx = line_target()
        binder = np.array([[8.0, 3.0, 0.0], [8.0, 0.0, 5.0], [8.0, 40.0, 0.0]])
        assert proxy_ipae(binder, ctx) == pytest.approx(31 * (1 - math.exp(-0.4)), rel=1e-12)

    def test_no_hotspots_raises(self):
        ctx = line_target(hot=())
        with pytest.raises(ValueError):
            proxy_ipae(np.zeros((1, 3)), ctx)

    @given(
        arrays(float, (6, 3), elements=st.floats(-2.8, 2.8)),
        st.floats(1.0, 1.5),
    )
    def test_moving_away_never_helps(self, binder, factor):
        # one hotspot at the origin which is also the only target point, and every
        # point stays inside the interface cutoff, so the interface set is fixed
        ctx = TargetContext(np.zeros((1, 3)), np.array([True]))
        assert proxy_ipae(binder * factor, ctx) >= proxy_ipae(binder, ctx) - 1e-12

    @given(arrays(float, 3, elements=st.floats(-100, 100)))
    def test_translation_invariant(self, shift):
        ctx = line_target()
        binder = np.array([[8.0, 3.0, 0.0], [4.0, 0.0, 5.0], [12.0, 2.0, 2.0]])
        a = proxy_ipae(binder, ctx)
        b = proxy_ipae(binder + shift, ctx.translated(shift))
        assert b == pytest.approx(a, abs=1e-9)


class TestContacts:
    def test_engineered_count(self):
        ctx = line_target()
        # three binder points each placed 3 A above a distinct target point; spacing 4 keeps others beyond 3.5
        binder = ctx.points[[0, 2, 4]] + np.array([0.0, 3.0, 0.0])
        assert contact_count_reward(binder, ctx) == 3.0
        assert contact_count_reward(binder + np.array([0.0, 10.0, 0.0]), ctx) == 0.0

    def test_radius_inclusive(self):
        ctx = line_target(n=1, hot=(0,))
        assert contact_count_reward(np.array([[3.5, 0.0, 0.0]]), ctx, radius=3.5) == 1.0


def test_com_placement():
    ctx = line_target(hot=(1, 3))
    binder = np.array([[8.0, 3.0, 4.0], [8.0, -3.0, 4.0]])
    assert com_placement_reward(binder, ctx) == pytest.approx(-4.0)


class TestNormalize:
    def test_half(self):
        spec = RewardSpec((RewardTerm("proxy_ipae", 1.0, 31.0),))
        assert normalize_reward({"proxy_ipae": 15.5}, spec) == 0.5

    def test_zeros(self):
        spec = RewardSpec.ipae_plus_contacts()
        assert normalize_reward({"proxy_ipae": 0.0, "contact_count": 0.0}, spec) == 0.0

    def test_weights_scale_linearly(self):
        raw = {"proxy_ipae": 9.0, "contact_count": 4.0}
        spec = RewardSpec.ipae_plus_contacts()
        assert normalize_reward(raw, spec.scaled(2.0)) == pytest.approx(2 * normalize_reward(raw, spec))

    def test_missing_component(self):
        with pytest.raises(RewardConfigError):
            normalize_reward({"proxy_ipae": 1.0}, RewardSpec.ipae_plus_contacts())

    def test_bad_terms(self):
        with pytest.raises(RewardConfigError):
            RewardTerm("plddt")
        with pytest.raises(RewardConfigError):
            RewardTerm("proxy_ipae", 1.0, 0.0)

    def test_custom_needs_callable(self):
        spec = RewardSpec((RewardTerm("custom"),))
        with pytest.raises(RewardConfigError):
            raw_components(np.zeros((1, 3)), [0], line_target(), spec)
        r, raw = evaluate_reward(np.zeros((1, 3)), [0], line_target(), spec, custom=lambda b, l, c: 2.5)
        assert r == 2.5 and raw["custom"] == 2.5


def test_evaluate_reports_all_components():
    ctx = line_target()
    binder = ctx.points[:3] + np.array([0.0, 3.0, 0.0])
    reward, raw = evaluate_reward(binder, [0, 0, 0], ctx, RewardSpec.ipae_only())
    assert set(raw) == {"proxy_ipae", "contact_count", "com_placement"}
    assert reward == pytest.approx(-raw["proxy_ipae"] / IPAE_MAX)


def test_external_scorer(tmp_path):
    script = tmp_path / "score.py"
    script.write_text(
        textwrap.dedent(
            """
            import sys
            chains = {line[21] for line in open(sys.argv[1]) if line.startswith("ATOM")}
            print("chains", "".join(sorted(chains)))
            print(len(chains) * 1.25)
            """
        )
    )
    scorer = ExternalScorer([sys.executable, str(script)])
    assert scorer(np.zeros((2, 3)), [0, 0], line_target()) == 2.5


def test_external_scorer_failure(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("print('no number here')\n")
    with pytest.raises(RuntimeError):
        ExternalScorer([sys.executable, str(script)])(np.zeros((1, 3)), [0], line_target())

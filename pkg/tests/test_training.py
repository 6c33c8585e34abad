import numpy as np
import pytest

from pfmdose import networks
from pfmdose.errors import ConfigError, ContractError
from pfmdose.networks import agg_forward, infer_forward
from pfmdose.phantom import builtin_spec, make_cases
from pfmdose.tensor import Tensor
from pfmdose.training import (
    Adam,
    AdamState,
    Schedule,
    TrainConfig,
    adam_step,
    epoch_means,
    lr_at,
    paired_batches,
    parse_config,
    steps_per_epoch,
    train_agg,
    train_infer,
)

TINY = dict(image_size=16, embed_dim=8, heads=2, ffn_mult=2, head_channels=4)


@pytest.fixture(scope="module")
def data16():
    src = make_cases(builtin_spec("source-like", image_size=16), 5)
    tgt = make_cases(builtin_spec("target-like", image_size=16), 3)
    return src, tgt


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_grads_leave_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_computed():
    p = Tensor(np.array(0.0), requires_grad=True)
    adam_step([p], [np.array(1.0)], AdamState(), lr=0.1)
    # m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
    assert p.data == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_converges_on_quadratic():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam([w])
    for _ in range(500):
        opt.zero_grad()
        (w * w).backward()
        opt.step(0.05)
    assert abs(w.data) < 1e-2


def test_adam_missing_grad():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step([p], [None], AdamState(), lr=0.1)


def test_adam_step_counter_increases():
    p = Tensor(np.zeros(2), requires_grad=True)
    st = AdamState()
    for k in range(1, 4):
        adam_step([p], [np.ones(2)], st, lr=0.1)
        assert st.step == k
        assert st.m[0].shape == p.shape


# -- schedule ---------------------------------------------------------------------

def test_schedule_values():
    s = Schedule(5e-4)
    assert lr_at(s, 0) == 5e-4
    assert lr_at(s, 199) == 5e-4
    assert lr_at(s, 250) == pytest.approx(2.5e-4, abs=1e-18)
    assert lr_at(s, 300) == 0.0


def test_schedule_continuous_at_knee():
    s = Schedule(1e-4)
    assert lr_at(s, 200) == pytest.approx(lr_at(s, 199), rel=1e-12)


def test_schedule_out_of_range():
    with pytest.raises(ContractError):
        lr_at(Schedule(5e-4), 301)
    with pytest.raises(ContractError):
        lr_at(Schedule(5e-4), -1)


def test_compressed_schedule_shape():
    s = Schedule.compressed(5e-4, 30)
    assert (s.constant_epochs, s.total_epochs) == (20, 30)
    assert lr_at(s, 19) == 5e-4 and lr_at(s, 25) == pytest.approx(2.5e-4)


# -- config -----------------------------------------------------------------------

def test_config_parse_and_snapshot():
    cfg = parse_config("seed=3  # run seed\nepochs=5\nuse_dtl=0\nlr_agg=1e-3\n")
    assert (cfg.seed, cfg.epochs, cfg.use_dtl, cfg.lr_agg) == (3, 5, False, 1e-3)
    assert parse_config(cfg.to_text()) == cfg


def test_config_defaults_follow_desk_settings():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.image_size, cfg.embed_dim, cfg.heads) == (4, 30, 32, 32, 4)
    assert (cfg.lr_agg, cfg.lr_infer) == (5e-4, 1e-4)
    assert (cfg.n_source, cfg.n_target) == (40, 12)


@pytest.mark.parametrize("text", ["batch_size=0", "epochs=0", "bogus=1", "seed=x", "noequals", "lam=2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# -- batching ---------------------------------------------------------------------

def test_pairing_cycles_shorter_domain():
    batches = list(paired_batches(10, 3, 4, seed=0, epoch=0))
    assert len(batches) == steps_per_epoch(10, 3, 4) == 3
    src = np.concatenate([s for s, _ in batches])
    tgt = np.concatenate([t for _, t in batches])
    assert sorted(src) == list(range(10))
    assert len(tgt) == 10 and set(tgt) == {0, 1, 2}
    # every target index appears before any repeats within a cycle
    assert sorted(tgt[:3]) == [0, 1, 2]


def test_pairing_depends_on_seed_and_epoch():
    a = [s.tolist() for s, _ in paired_batches(8, 8, 4, 0, 0)]
    assert a == [s.tolist() for s, _ in paired_batches(8, 8, 4, 0, 0)]
    assert a != [s.tolist() for s, _ in paired_batches(8, 8, 4, 0, 1)]


# -- stages -----------------------------------------------------------------------

def test_one_case_one_epoch_one_step(data16):
    src, tgt = data16
    cfg = TrainConfig(epochs=1, **TINY)
    _, hist = train_agg(cfg, src[:1], tgt[:1])
    assert len(hist) == 1


def test_history_recombines(data16):
    src, tgt = data16
    cfg = TrainConfig(epochs=2, **TINY)
    agg, hist = train_agg(cfg, src, tgt)
    w = cfg.weights()
    assert all(abs(r.l_total - r.recombined(w)) < 1e-12 for r in hist)
    assert all(min(r.l_brd) >= 0 and r.l_s >= 0 and r.l_t >= 0 for r in hist)
    _, ihist = train_infer(cfg, agg, tgt)
    assert all(abs(r.l_total - r.recombined(w)) < 1e-12 for r in ihist)


def test_identical_domains(data16):
    src, _ = data16
    cfg = TrainConfig(epochs=6, lr_agg=2e-3, **TINY)
    _, hist = train_agg(cfg, src, src)
    # the two domains draw different shuffles, so compare only the pairing-free quantities
    assert sum(hist[-1].l_brd) < sum(hist[0].l_brd)
    cfg1 = TrainConfig(epochs=1, batch_size=5, **TINY)
    _, h1 = train_agg(cfg1, src, src)
    assert h1[0].l_s == h1[0].l_t


def test_empty_dataset(data16):
    src, tgt = data16
    with pytest.raises(ConfigError):
        train_agg(TrainConfig(**TINY), [], tgt)
    with pytest.raises(ConfigError):
        train_infer(TrainConfig(**TINY), None, tgt)


def test_infer_leaves_agg_bitwise_unchanged(data16):
    src, tgt = data16
    cfg = TrainConfig(epochs=2, **TINY)
    agg, _ = train_agg(cfg, src, tgt)
    before = {k: v.tobytes() for k, v in agg.state_dict().items()}
    train_infer(cfg, agg, tgt)
    assert {k: v.tobytes() for k, v in agg.state_dict().items()} == before


def test_gamma_zero_is_plain_fine_tuning(data16):
    src, tgt = data16
    cfg = TrainConfig(epochs=2, **TINY)
    agg, _ = train_agg(cfg, src, tgt)
    net_a, h_a = train_infer(cfg.with_overrides(gamma=0.0), agg, tgt)
    net_b, h_b = train_infer(cfg.with_overrides(use_dtl=False), agg, tgt)
    assert [r.l_t_prime for r in h_a] == [r.l_t_prime for r in h_b]
    assert all(r.l_total == r.l_t_prime for r in h_a)


def test_large_gamma_anchors_student(data16):
    src, tgt = data16
    cfg = TrainConfig(epochs=1, **TINY)
    agg, _ = train_agg(cfg, src, tgt)
    # student starts as a copy of the teacher; 5 steps with a heavy anchor
    cfg5 = cfg.with_overrides(gamma=100.0, batch_size=1, epochs=5)
    _, hist = train_infer(cfg5, agg, tgt[:1])
    assert len(hist) == 5
    assert all(r.l_dtl < hist[0].l_dtl + 1e-6 for r in hist)


def test_training_is_deterministic(data16, tmp_path):
    src, tgt = data16
    cfg = TrainConfig(epochs=2, **TINY)
    a1, h1 = train_agg(cfg, src, tgt, out_dir=tmp_path / "r1")
    a2, h2 = train_agg(cfg, src, tgt, out_dir=tmp_path / "r2")
    assert (tmp_path / "r1" / "agg_loss.csv").read_bytes() == (tmp_path / "r2" / "agg_loss.csv").read_bytes()
    for name in sorted(p.name for p in (tmp_path / "r1" / "agg_checkpoint").iterdir()):
        assert (tmp_path / "r1" / "agg_checkpoint" / name).read_bytes() == (tmp_path / "r2" / "agg_checkpoint" / name).read_bytes()


def test_periodic_checkpoints(data16, tmp_path):
    src, tgt = data16
    cfg = TrainConfig(epochs=2, checkpoint_every=1, **TINY)
    train_agg(cfg, src[:2], tgt[:2], out_dir=tmp_path)
    assert (tmp_path / "agg_checkpoint_epoch001" / "model.cfg").exists()
    assert (tmp_path / "agg_checkpoint_epoch002" / "model.cfg").exists()


def test_epoch_means():
    class R:
        def __init__(self, v):
            self.l_total = v

    assert epoch_means([R(1.0), R(3.0), R(5.0), R(7.0)], 2) == [2.0, 6.0]

import numpy as np
import pytest

from gradcheck import TOL, numeric_grad, rel_error
from rfv.bank import Bank
from rfv.errors import EmptyDataset, ShapeMismatch
from rfv.policy import (
    ChunkEnsembler,
    MemoryEncoder,
    MemoryInputs,
    Policy,
    PolicyConfig,
    RetrievalContext,
    act,
    bc_loss,
    bc_loss_grad,
    chunk_targets,
    ensemble_weights,
    forward,
    backward,
    make_sample,
    memory_layout,
    stack_samples,
    train,
    train_on_samples,
)
from rfv.retriever import EmbedderConfig, RankedList, build_index
from rfv.sim.evaluate import collect_demos
from rfv.sim.humanbank import synthesize_human_bank
from rfv.sim.world import Demo, RobotObservation, TaskSpec

TINY = dict(d_model=16, d_hidden=12, heads=2, layers=1, horizon=3, embed_dim=8, grid=2,
            max_robot_len=8, max_memory_len=16)
ROOMY = {**TINY, "max_robot_len": 128, "max_memory_len": 512}


def _mem(rng, eid="m", score=1.0, nv=2, d=16, e=8):
    return MemoryInputs(eid, score, rng.normal(size=e), rng.normal(size=(nv, d)),
                        rng.random(256), rng.random(32))


def _batch(rng, cfg, b=2, k=2, nv=2):
    samples = [make_sample(rng.normal(size=(len(cfg.views) * cfg.grid**2, cfg.d_model)),
                           rng.normal(size=cfg.dof), rng.normal(size=cfg.embed_dim),
                           [_mem(rng, f"m{j}", nv=nv, d=cfg.d_model, e=cfg.embed_dim) for j in range(k)]
                           if cfg.use_retrieval else None) for _ in range(b)]
    return stack_samples(samples, cfg)


def _perturbed(cfg, seed):
    pol = Policy(cfg)
    rng = np.random.default_rng(seed)
    for k in pol.store.names():
        pol.store.params[k] += rng.normal(0, 0.3, pol.store[k].shape)
    return pol


@pytest.mark.parametrize("mode", ["paper", "standard"])
@pytest.mark.parametrize("retrieval", [True, False])
def test_end_to_end_gradient(mode, retrieval):
    cfg = PolicyConfig(**TINY, fusion_mode=mode, use_retrieval=retrieval)
    pol = _perturbed(cfg, 1)
    rng = np.random.default_rng(2)
    batch = _batch(rng, cfg)
    out, cache = forward(pol.store, batch, cfg)
    r = rng.normal(size=out.shape)
    grads = backward(r, cache, pol.store, cfg)
    f = lambda: float(np.sum(forward(pol.store, batch, cfg)[0] * r))
    for name in pol.store.names():
        num = numeric_grad(f, pol.store.params[name])
        ana = grads.get(name, np.zeros_like(num))
        assert rel_error(num, ana) < TOL, name


@pytest.mark.parametrize("mode", ["paper", "standard"])
def test_gradient_wrt_memory_inputs(mode):
    cfg = PolicyConfig(**TINY, fusion_mode=mode)
    pol = _perturbed(cfg, 3)
    rng = np.random.default_rng(4)
    batch = _batch(rng, cfg)
    out, cache = forward(pol.store, batch, cfg)
    r = rng.normal(size=out.shape)
    backward(r, cache, pol.store, cfg)
    f = lambda: float(np.sum(forward(pol.store, batch, cfg)[0] * r))
    for name in ("mem_video", "mem_text", "mem_traj", "mem_occ"):
        x = getattr(batch, name)
        assert rel_error(numeric_grad(f, x), cache["input_grads"][name]) < TOL, name


def test_zeroed_channel_gets_no_gradient():
    cfg = PolicyConfig(**TINY, zero_traj=True)
    pol = _perturbed(cfg, 5)
    batch = _batch(np.random.default_rng(6), cfg)
    out, cache = forward(pol.store, batch, cfg)
    g = backward(np.ones_like(out), cache, pol.store, cfg)
    assert not g["traj_enc.W1"].any() and g["mask_enc.W1"].any()
    batch.mem_traj[:] = 123.0
    assert np.array_equal(forward(pol.store, batch, cfg)[0], out)


def test_output_shape_and_zero_head():
    cfg = PolicyConfig(**TINY)
    pol = Policy(cfg)
    batch = _batch(np.random.default_rng(0), cfg, b=3)
    assert pol.predict(batch).shape == (3, 3, 4)
    pol.store.params["head.W"][:] = 0
    assert not pol.predict(batch).any()


def test_single_memory_token_attention_is_one():
    cfg = PolicyConfig(**TINY, fusion_mode="paper")
    pol = Policy(cfg)
    _, cache = forward(pol.store, _batch(np.random.default_rng(0), cfg, k=1, nv=1), cfg)
    # per head each memory query attends over resampled robot values; weights sum to 1
    a = cache["fatt"]["attn"]
    assert np.allclose(a.sum(-1), 1.0)
    lay = memory_layout([1])
    assert lay["length"] == 5 and lay["traj"].tolist() == [4]


def test_zero_value_projection_kills_fusion():
    for mode in ("paper", "standard"):
        cfg = PolicyConfig(**TINY, fusion_mode=mode)
        pol = Policy(cfg)
        pol.store.params["fuse.attn.Wv"][:] = 0
        pol.store.params["fuse.attn.bv"][:] = 0
        _, cache = forward(pol.store, _batch(np.random.default_rng(1), cfg), cfg)
        # out = 0 @ Wo + bo, and bo starts at zero
        assert not cache["fused_attn"].any()


def test_memory_layout():
    lay = memory_layout([16, 16, 16])
    assert lay["length"] == 3 * 20 + 2
    assert lay["sep"].tolist() == [20, 41]
    assert lay["state"].tolist() == [1, 22, 43]


def test_equal_score_permutation_invariance(entry_factory):
    bank = Bank(embedding_dim=8)
    for i, t in enumerate(["open the drawer", "close the drawer", "wipe the table"]):
        bank.add_entry(entry_factory(f"e{i}", t, w=16, h=16, seed=i))
    cfg = PolicyConfig(**ROOMY)
    enc = MemoryEncoder(bank, cfg)
    a = enc.inputs(RankedList((("e1", 0.5), ("e0", 0.5), ("e2", 0.1))))
    b = enc.inputs(RankedList((("e0", 0.5), ("e1", 0.5), ("e2", 0.1))))
    assert [m.entry_id for m in a] == ["e0", "e1", "e2"] == [m.entry_id for m in b]
    pol = Policy(cfg)
    rng = np.random.default_rng(0)
    grid, prop, text = rng.normal(size=(4, 16)), rng.normal(size=4), rng.normal(size=8)
    pa = pol.predict(stack_samples([make_sample(grid, prop, text, a)], cfg))
    pb = pol.predict(stack_samples([make_sample(grid, prop, text, b)], cfg))
    assert np.array_equal(pa, pb)


def test_bc_loss():
    e = np.random.default_rng(0).normal(size=(8, 4))
    assert bc_loss(e, e) == 0.0
    assert bc_loss(e + 1, e) == 1.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(size=(2, 5, 3))
        ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(bc_loss(a, b) - ref) < 1e-12
    with pytest.raises(ShapeMismatch):
        bc_loss(np.zeros((2, 3)), np.zeros((3, 2)))
    g = bc_loss_grad(np.array([1.0, -1.0]), np.zeros(2))
    assert g.tolist() == [0.5, -0.5]


def test_chunk_targets_repeat_last():
    acts = np.arange(8.0).reshape(4, 2)
    ch = chunk_targets(acts, 3)
    assert len(ch) == 4 and ch[3].tolist() == [[6, 7]] * 3 and ch[1][2].tolist() == [6, 7]


def test_ensembler():
    w = ensemble_weights(5, 0.1)
    assert abs(w.sum() - 1) < 1e-9 and np.all(np.diff(w) < 0)
    e = ChunkEnsembler(1)
    assert e.step(np.array([[3.0, 4.0]])).tolist() == [3.0, 4.0]
    e = ChunkEnsembler(4)
    for _ in range(6):
        assert np.allclose(e.step(np.full((4, 2), 2.5)), 2.5)
    e = ChunkEnsembler(3, enabled=False)
    assert e.step(np.array([[1.0], [2.0], [3.0]])).tolist() == [1.0]


def test_ensembler_mixes_overlapping_chunks():
    e = ChunkEnsembler(2, m=0.0)
    e.step(np.array([[0.0], [10.0]]))
    assert e.step(np.array([[20.0], [30.0]])).tolist() == [15.0]


def _toy_demo(rng, n=6, instruction="touch the lamp"):
    obs = [RobotObservation({"top": rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)},
                            rng.random(4), instruction) for _ in range(n)]
    return Demo(instruction, obs, rng.random((n, 4)), True, "Reach", 0)


def _bank(entry_factory, dim=8):
    bank = Bank(embedding_dim=dim)
    for i, t in enumerate(["touch the lamp", "touch the stove", "push the block"]):
        bank.add_entry(entry_factory(f"e{i}", t, w=16, h=16, seed=i))
    return bank


def test_overfit_single_demo_and_determinism():
    spec = TaskSpec("PickPlace")
    demo = collect_demos((spec,), 1, 0)[0]
    bank = synthesize_human_bank((spec,), 4, 0, embed_dim=64)
    idx = build_index(bank, EmbedderConfig(64))
    cfg = PolicyConfig(steps=200)
    r1 = train([demo], bank, idx, cfg)
    r2 = train([demo], bank, idx, cfg)
    assert r1.losses[-1] < 0.1 * r1.losses[0]
    assert r1.losses == r2.losses
    for k in r1.policy.store.names():
        assert r1.policy.store[k].tobytes() == r2.policy.store[k].tobytes()


def test_k_larger_than_bank(entry_factory):
    bank = _bank(entry_factory)
    cfg = PolicyConfig(**ROOMY, k_retrieved=10, steps=2)
    res = train([_toy_demo(np.random.default_rng(0))], bank, build_index(bank, EmbedderConfig(8)), cfg)
    ctx = RetrievalContext(bank, build_index(bank, EmbedderConfig(8)), cfg)
    assert len(ctx.memories("touch the lamp")) == 3
    obs = _toy_demo(np.random.default_rng(1)).observations[0]
    assert act(res.policy, obs, ctx).shape == (4,)


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_on_samples([], [], PolicyConfig(**TINY))
    with pytest.raises(EmptyDataset):
        train([], None, None, PolicyConfig(**TINY, use_retrieval=False))


def test_checkpoint_roundtrip_records_mode(tmp_path):
    cfg = PolicyConfig(**TINY, fusion_mode="standard")
    pol = _perturbed(cfg, 0)
    pol.save(tmp_path / "ck")
    back = Policy.load(tmp_path / "ck")
    assert back.cfg == cfg and back.cfg.fusion_mode == "standard"
    for k in pol.store.names():
        assert back.store[k].tobytes() == pol.store[k].tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(k_retrieved=0)
    with pytest.raises(ValueError):
        PolicyConfig(fusion_mode="other")
    with pytest.raises(ValueError):
        PolicyConfig(d_model=10, heads=4)

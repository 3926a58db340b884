import numpy as np
import pytest

from mtmv import data as dt
from mtmv import graph as gr
from mtmv import training as tr
from mtmv.autodiff import Tensor
from mtmv.model import CLS, LINK, RECON, ModelConfig, TaskSpec


def small_graph(seed=0, n=30, k=2, communities=2, p_in=0.35, p_out=0.05, rho=0.6):
    return dt.generate(dt.SyntheticConfig(n=n, communities=communities, k=k,
                                          p_in=p_in, p_out=p_out, rho=rho, seed=seed))


def model_cfg(k=2, lam_link=1.0, lam_cls=1.0, lam_recon=0.0, **kw):
    tasks = [TaskSpec(LINK, lam_link), TaskSpec(CLS, lam_cls)]
    if lam_recon:
        tasks.append(TaskSpec(RECON, lam_recon))
    defaults = dict(views=k, layers=2, hidden=16, heads=4, alpha=0.5, tasks=tasks)
    defaults.update(kw)
    return ModelConfig(**defaults)


def train_cfg(**kw):
    defaults = dict(learning_rate=0.01, dropout=0.0, max_epochs=30, patience=30,
                    seed=0, lambda_cls=1.0)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def test_split_rejects_degenerate_fraction():
    with pytest.raises(ValueError):
        tr.TrainConfig(link_train_fraction=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(link_train_fraction=0.0)


def test_split_deterministic_under_seed():
    g = small_graph()
    cfg = train_cfg()
    p1 = tr.split(g, cfg, np.random.default_rng(np.random.Philox(5)))
    p2 = tr.split(g, cfg, np.random.default_rng(np.random.Philox(5)))
    np.testing.assert_array_equal(p1.train_edges, p2.train_edges)
    np.testing.assert_array_equal(p1.val_edges, p2.val_edges)
    np.testing.assert_array_equal(p1.test_edges, p2.test_edges)
    np.testing.assert_array_equal(p1.train_nodes, p2.train_nodes)


def test_split_sizes_half():
    g = small_graph(seed=3, n=40)
    edges, _ = gr.union_edges(g)
    m = len(edges)
    plan = tr.split(g, train_cfg(), np.random.default_rng(0))
    n_train = int(round(0.5 * m))
    n_val = (m - n_train) // 2
    assert len(plan.train_edges) == n_train
    assert len(plan.val_edges) == n_val
    assert len(plan.test_edges) == m - n_train - n_val


def test_split_exact_counts_100_edges():
    # craft a graph with exactly 100 union edges
    rng = np.random.default_rng(0)
    n = 50
    pairs = set()
    while len(pairs) < 100:
        u, v = rng.integers(0, n, size=2)
        if u != v:
            pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    rows, cols = [], []
    for u, v in pairs:
        rows += [u, v]
        cols += [v, u]
    from mtmv.autodiff import SparseMatrix
    g = gr.MultiViewGraph(n=n, views=[SparseMatrix.from_coo(n, n, rows, cols,
                                                            np.ones(200))])
    plan = tr.split(g, train_cfg(), np.random.default_rng(1))
    assert (len(plan.train_edges), len(plan.val_edges), len(plan.test_edges)) == (50, 25, 25)


def test_split_partitions_edges():
    g = small_graph(seed=1)
    plan = tr.split(g, train_cfg(), np.random.default_rng(2))
    edges, _ = gr.union_edges(g)
    combined = np.vstack([plan.train_edges, plan.val_edges, plan.test_edges])
    assert len(combined) == len(edges)
    assert len(set(map(tuple, combined.tolist()))) == len(edges)


def test_split_test_edges_absent_from_message_passing():
    g = small_graph(seed=2)
    plan = tr.split(g, train_cfg(), np.random.default_rng(3))
    held_out = set(map(tuple, plan.val_edges.tolist())) | \
        set(map(tuple, plan.test_edges.tolist()))
    for view in plan.train_views:
        rows = np.repeat(np.arange(view.rows), np.diff(view.row_offsets))
        for u, v in zip(rows, view.col_indices):
            if u < v:
                assert (int(u), int(v)) not in held_out


def test_split_node_partition():
    g = small_graph(seed=4)
    plan = tr.split(g, train_cfg(), np.random.default_rng(4))
    labeled = set(g.labeled_nodes.tolist())
    parts = [set(plan.train_nodes.tolist()), set(plan.val_nodes.tolist()),
             set(plan.test_nodes.tolist())]
    assert parts[0] | parts[1] | parts[2] == labeled
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])


def test_split_warns_on_empty_view(caplog):
    from mtmv.autodiff import SparseMatrix
    dense = np.zeros((6, 6))
    dense[0, 1] = dense[1, 0] = 1.0
    v_full = SparseMatrix.from_dense(dense)
    v_empty = SparseMatrix.from_coo(6, 6, [], [], [])
    g = gr.MultiViewGraph(n=6, views=[v_full, v_empty])
    with caplog.at_level("WARNING"):
        tr.split(g, train_cfg(), np.random.default_rng(0))
    assert any("no train edges" in r.message for r in caplog.records)


def test_split_sample_nonedges():
    g = small_graph(seed=5)
    plan = tr.split(g, train_cfg(sample_nonedges=True), np.random.default_rng(6))
    assert plan.extra_train_pairs is not None
    assert len(plan.extra_train_pairs) == len(plan.train_edges)
    union = set(map(tuple, gr.union_edges(g)[0].tolist()))
    for u, v in plan.extra_train_pairs.tolist():
        assert (u, v) not in union


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.ones((3, 3)), requires_grad=True)
    opt = tr.Adam([("p", p)], lr=0.1)
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_matches_scalar_oracle():
    theta = Tensor(np.array([0.0]), requires_grad=True)
    theta.grad[...] = 1.0
    opt = tr.Adam([("theta", theta)], lr=0.001)
    opt.step()
    # scalar oracle for one bias-corrected step
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.001
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = 0.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert theta.data[0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(-0.000999999, abs=1e-8)


def test_adam_quadratic_convergence():
    theta = Tensor(np.array([3.0]), requires_grad=True)
    opt = tr.Adam([("theta", theta)], lr=0.01)
    for _ in range(1000):
        theta.zero_grad()
        theta.grad[...] = 2.0 * theta.data   # d/dt theta^2
        opt.step()
    assert theta.data[0] ** 2 < 1e-6


def test_adam_aborts_on_nan_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad[...] = np.nan
    opt = tr.Adam([("layer.weight", p)], lr=0.01)
    with pytest.raises(tr.DivergenceError, match="layer.weight"):
        opt.step()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_single_task_link_gives_cls_params_zero_gradient():
    g = small_graph(seed=6)
    mcfg = model_cfg()
    tcfg = train_cfg(mode="single-link", max_epochs=3)

    # run a few epochs, then inspect gradients after one more manual step
    res = tr.train(g, mcfg, tcfg)
    import mtmv.autodiff as ad
    from mtmv import model as md
    params = res.params
    plan = res.plan
    alpha, equal, weights = tr.resolve_mode("single-link", res.model_cfg, tcfg)
    norm, raw = tr._prepare_adjacencies(plan.train_views, False)
    ad.zero_grad(params.all())
    fwd = md.forward_pass(params, norm, raw, res.model_cfg,
                          link_pairs=plan.train_edges, alpha=alpha,
                          equal_weights=equal, need_recon=False, training=False)
    loss = md.binary_cross_entropy(fwd.link_probs, plan.train_bits.astype(float))
    ad.backward(loss)
    for name, p in params.named():
        exclusive_to_cls = ".node_classification." in f".{name}." or \
            name in (f"head.{CLS}.w", f"head.{CLS}.b")
        if "node_classification" in name:
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad),
                                          err_msg=name)
    # decoders get no gradient either (recon inactive)
    for i in range(len(params.decoders)):
        np.testing.assert_array_equal(params.decoders[i].grad,
                                      np.zeros_like(params.decoders[i].data))


def test_train_determinism_bitwise_history():
    g = small_graph(seed=7)
    mcfg = model_cfg()
    tcfg = train_cfg(max_epochs=10, dropout=0.5)
    r1 = tr.train(g, mcfg, tcfg)
    r2 = tr.train(g, mcfg, tcfg)
    assert len(r1.history) == len(r2.history)
    for h1, h2 in zip(r1.history, r2.history):
        assert h1["train_loss"] == h2["train_loss"]
        assert h1["val_loss"] == h2["val_loss"]
    assert r1.report.link == r2.report.link
    assert r1.report.classification == r2.report.classification


def test_recon_zero_weight_matches_plain_model_history():
    g = small_graph(seed=8)
    tcfg = train_cfg(max_epochs=8)
    plain = tr.train(g, model_cfg(lam_recon=0.0), tcfg)
    with_decoder_task = tr.train(g, model_cfg(lam_recon=0.01), train_cfg(
        max_epochs=8, lambda_recon=0.0))
    for h1, h2 in zip(plain.history, with_decoder_task.history):
        assert h1["train_loss"] == h2["train_loss"]
        assert h1["val_loss"] == h2["val_loss"]


def test_early_stopping_restores_best_epoch_params():
    g = small_graph(seed=9)
    mcfg = model_cfg()
    # high lr encourages noisy validation so best epoch != last epoch
    tcfg = train_cfg(learning_rate=0.2, max_epochs=40, patience=3, dropout=0.5)
    res = tr.train(g, mcfg, tcfg)
    val_losses = [h["val_loss"] for h in res.history]
    assert res.best_epoch == int(np.argmin(val_losses))
    assert res.best_epoch < len(res.history) - 1  # early stop actually triggered


def test_train_equ_mode_exports_exact_uniform_weights():
    g = small_graph(seed=10, k=3)
    res = tr.train(g, model_cfg(k=3), train_cfg(mode="equ", max_epochs=5))
    assert res.attention, "no attention rows exported"
    for mechanism, head, view, weight in res.attention:
        assert weight == 1.0 / 3.0


def test_train_divergence_error_names_epoch_and_seed(monkeypatch):
    g = small_graph(seed=11)
    mcfg = model_cfg()
    tcfg = train_cfg(max_epochs=50, seed=11)
    monkeypatch.setattr(tr.md, "binary_cross_entropy",
                        lambda probs, y: Tensor(np.array(np.nan)))
    with pytest.raises(tr.DivergenceError, match=r"epoch 0 \(seed 11\)"):
        tr.train(g, mcfg, tcfg)


def test_overfit_small_graph_link_auc():
    g = small_graph(seed=12, n=30)
    mcfg = model_cfg(hidden=16)
    tcfg = train_cfg(max_epochs=300, patience=300, learning_rate=0.01)
    res = tr.train(g, mcfg, tcfg)
    # overfit check looks at the final-epoch state, not the restored best-val params
    from mtmv import metrics as mt, model as md
    res.params.load_state(res.final_state)
    norm, raw = tr._prepare_adjacencies(res.plan.train_views, False)
    fwd = md.forward_pass(res.params, norm, raw, res.model_cfg,
                          link_pairs=res.plan.train_edges, training=False)
    ap, auc = mt.link_metrics(fwd.link_probs.data, res.plan.train_bits)
    assert auc > 0.95


def test_run_ablation_single_variant():
    g = small_graph(seed=13)
    rows = tr.run_ablation(g, model_cfg(), train_cfg(max_epochs=3), variants=("equ",))
    assert len(rows) == 1 and rows[0]["variant"] == "equ"


def test_run_ablation_rows_sorted_and_single_sums_time():
    g = small_graph(seed=14)
    rows = tr.run_ablation(g, model_cfg(), train_cfg(max_epochs=3),
                           variants=("single", "full"))
    assert [r["variant"] for r in rows] == ["full", "single"]
    single = rows[1]
    link_res = single["results"]["link"]
    cls_res = single["results"]["cls"]
    expected = float(np.mean(link_res.epoch_times)) + float(np.mean(cls_res.epoch_times))
    assert single["mean_epoch_seconds"] == pytest.approx(expected)


def test_single_view_baseline_runs_and_reports_link():
    g = small_graph(seed=15, k=2)
    res = tr.train_single_view_baseline(g, model_cfg(k=2), train_cfg(max_epochs=5),
                                        view=0, task=LINK)
    assert res.report.link is not None
    assert res.report.classification is None
    # head still predicts both view bits
    assert res.params.head_w[LINK].shape[1] == 2


def test_mode_validation():
    with pytest.raises(ValueError, match="unknown mode"):
        tr.TrainConfig(mode="bogus")


def test_batch_edges_subsamples_and_stays_deterministic():
    g = small_graph(seed=16)
    mcfg = model_cfg()
    tcfg = train_cfg(max_epochs=6, batch_edges=10)
    r1 = tr.train(g, mcfg, tcfg)
    r2 = tr.train(g, mcfg, tcfg)
    for h1, h2 in zip(r1.history, r2.history):
        assert h1["train_loss"] == h2["train_loss"]
    full = tr.train(g, mcfg, train_cfg(max_epochs=6))
    assert r1.history[0]["train_loss"] != full.history[0]["train_loss"]


def test_binarize_adjacency_changes_weighted_graph_results():
    rng = np.random.default_rng(17)
    from mtmv.autodiff import SparseMatrix
    n = 20
    views = []
    for _ in range(2):
        upper = np.triu((rng.random((n, n)) < 0.3), k=1) * rng.uniform(0.5, 3.0, (n, n))
        views.append(SparseMatrix.from_dense(upper + upper.T))
    g = gr.MultiViewGraph(n=n, views=views, labels=np.arange(n) % 2, n_classes=2)
    weighted = tr.train(g, model_cfg(), train_cfg(max_epochs=4))
    binarized = tr.train(g, model_cfg(), train_cfg(max_epochs=4,
                                                   binarize_adjacency=True))
    assert weighted.history[0]["train_loss"] != binarized.history[0]["train_loss"]


def test_run_ablation_threaded_matches_serial():
    g = small_graph(seed=18)
    mcfg = model_cfg()
    tcfg = train_cfg(max_epochs=4)
    serial = tr.run_ablation(g, mcfg, tcfg, variants=("full", "equ"), max_threads=1)
    threaded = tr.run_ablation(g, mcfg, tcfg, variants=("full", "equ"), max_threads=2)
    assert [r["variant"] for r in serial] == [r["variant"] for r in threaded]
    for a, b in zip(serial, threaded):
        assert a["link"] == b["link"]
        assert a["classification"] == b["classification"]


def test_train_rejects_provided_feature_mode():
    g = small_graph(seed=19)
    mcfg = model_cfg(feature_mode="provided")
    with pytest.raises(ValueError, match="identity features"):
        tr.train(g, mcfg, train_cfg(max_epochs=2))

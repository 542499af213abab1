import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from unidwm import numerics
from unidwm.bevtok import LanguageProjection
from unidwm.worldlink import (CurrentToFutureLink, EgoEncoder, QueryError, SeparatedGenerator, WorldQueries,
                              assemble, current_to_future, pool_regions, region_grid, split_groups)


def test_pool_examples():
    grid = torch.tensor([[1.0, 5.0], [3.0, 2.0]]).view(1, 1, 2, 2)
    assert pool_regions(grid, 1, "max").tolist() == [[[5.0]]]
    const = torch.full((1, 3, 8, 8), 0.7)
    probe = torch.randn(3)
    for mode in ("max", "avg", "attention"):
        out = pool_regions(const, 4, mode, probe)
        torch.testing.assert_close(out, torch.full((1, 4, 3), 0.7))


def test_four_queries_from_quadrants():
    x = torch.randn(2, 5, 8, 8)
    q = pool_regions(x, 4, "max")
    assert region_grid(8, 8, 4) == (2, 2)
    quads = [x[:, :, :4, :4], x[:, :, :4, 4:], x[:, :, 4:, :4], x[:, :, 4:, 4:]]
    for i, quad in enumerate(quads):
        assert torch.equal(q[:, i], quad.amax(dim=(2, 3)))


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8, 16]))
def test_max_pool_exhaustive(seed, n):
    x = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
    rows, cols = region_grid(8, 8, n)
    q = pool_regions(x, n, "max")
    rh, cw = 8 // rows, 8 // cols
    for r in range(rows):
        for c in range(cols):
            block = x[0, :, r * rh:(r + 1) * rh, c * cw:(c + 1) * cw]
            assert torch.equal(q[0, r * cols + c], block.amax(dim=(1, 2)))


def test_pool_errors():
    with pytest.raises(QueryError):
        pool_regions(torch.zeros(1, 1, 8, 8), 3)
    with pytest.raises(QueryError):
        pool_regions(torch.zeros(1, 1, 8, 8), 4, "median")
    with pytest.raises(QueryError):
        pool_regions(torch.zeros(1, 1, 8, 8), 4, "attention")


def make_queries(seed=0, dim=16, dt=3, n=4):
    torch.manual_seed(seed)
    return WorldQueries(dim, dt, n), LanguageProjection(dim, 24)


def test_assemble_shape_and_equal_groups():
    wq, proj = make_queries()
    comp = torch.randn(1, 16, 8, 8)
    with torch.no_grad():
        wq.frame_embedding.zero_()
    out = wq(comp, torch.zeros(1, 3, 3), proj)
    assert out.shape == (1, 12, 24)
    groups = out.view(1, 3, 4, 24)
    assert torch.equal(groups[:, 0], groups[:, 1]) and torch.equal(groups[:, 0], groups[:, 2])
    same = torch.tensor([[[1.0, 0.5, 0.1]] * 3])
    g2 = wq(comp, same, proj).view(1, 3, 4, 24)
    assert torch.equal(g2[:, 0], g2[:, 2])


def test_assemble_paper_shape():
    torch.manual_seed(0)
    wq, proj = WorldQueries(64, 3, 4), LanguageProjection(64, 96)
    assert wq(torch.randn(1, 64, 8, 8), torch.randn(1, 3, 3), proj).shape == (1, 12, 96)


def test_assemble_group_independence():
    wq, proj = make_queries()
    comp = torch.randn(1, 16, 8, 8)
    ego = torch.randn(1, 3, 3)
    ego2 = ego.clone()
    ego2[0, 1] += torch.tensor([0.3, -0.2, 0.1])
    q = wq.init_queries(comp)
    pre_a = q.unsqueeze(1) + wq.ego(ego).unsqueeze(2) + wq.frame_embedding.view(1, 3, 1, -1)
    pre_b = q.unsqueeze(1) + wq.ego(ego2).unsqueeze(2) + wq.frame_embedding.view(1, 3, 1, -1)
    assert torch.equal(pre_a[:, 0], pre_b[:, 0]) and torch.equal(pre_a[:, 2], pre_b[:, 2])
    a = wq(comp, ego, proj).view(1, 3, 4, -1)
    b = wq(comp, ego2, proj).view(1, 3, 4, -1)
    assert torch.equal(a[:, 0], b[:, 0]) and torch.equal(a[:, 2], b[:, 2])
    assert not torch.equal(a[:, 1], b[:, 1])


def test_assemble_length_mismatch():
    wq, proj = make_queries()
    with pytest.raises(QueryError):
        assemble(torch.zeros(1, 4, 16), torch.zeros(1, 2, 16), torch.zeros(3, 16), proj)


def test_ego_encoder_wraps_yaw():
    torch.manual_seed(0)
    enc = EgoEncoder(8).double()
    a = enc(torch.tensor([1.0, 2.0, np.pi - 1e-9], dtype=torch.float64))
    b = enc(torch.tensor([1.0, 2.0, -np.pi + 1e-9], dtype=torch.float64))
    torch.testing.assert_close(a, b, atol=1e-7, rtol=0)


def test_assemble_gradient(f64):
    torch.manual_seed(0)
    wq, proj = WorldQueries(8, 3, 4).double(), LanguageProjection(8, 6).double()
    comp = torch.randn(1, 8, 4, 4)
    ego = torch.randn(1, 3, 3)
    assert numerics.finite_diff_check(lambda e: wq(comp, e, proj).pow(2).sum(), ego) < 1e-5
    q = wq.init_queries(comp).detach()
    e = wq.ego(ego).detach()
    assert numerics.finite_diff_check(lambda t: assemble(t, e, wq.frame_embedding, proj).pow(2).sum(), q) < 1e-5
    assert numerics.finite_diff_check(lambda _: wq(comp, ego, proj).pow(2).sum(), wq.frame_embedding) < 1e-5


def test_link_identity_at_zero_init():
    torch.manual_seed(0)
    link = CurrentToFutureLink(16, 4, 3, zero_init=True)
    bev = torch.randn(2, 64, 16)
    futures = current_to_future(link, bev, [torch.randn(2, 4, 16) for _ in range(3)], 3)
    assert len(futures) == 3
    for f in futures:
        assert f.shape == bev.shape and torch.equal(f, bev)


def test_link_frame_independence():
    torch.manual_seed(0)
    link = CurrentToFutureLink(16, 4, 3, zero_init=False)
    bev = torch.randn(1, 64, 16)
    qs = [torch.randn(1, 4, 16) for _ in range(3)]
    a = link(bev, qs)
    qs2 = list(qs)
    qs2[1] = qs[1] + 1.0
    b = link(bev, qs2)
    assert torch.equal(a[0], b[0]) and torch.equal(a[2], b[2]) and not torch.equal(a[1], b[1])
    single = link(bev, [qs[2]])
    torch.testing.assert_close(single[0], a[2], rtol=1e-6, atol=1e-6)


def test_link_group_count_error():
    link = CurrentToFutureLink(16, 4, 1)
    with pytest.raises(QueryError):
        current_to_future(link, torch.zeros(1, 4, 16), [torch.zeros(1, 4, 16)] * 2, 3)
    with pytest.raises(QueryError):
        split_groups(torch.zeros(1, 10, 16), 3)


def test_link_gradients(f64):
    torch.manual_seed(0)
    link = CurrentToFutureLink(8, 2, 3, zero_init=False).double()
    bev = torch.randn(1, 6, 8)
    q = torch.randn(1, 3, 8)

    def f_bev(x):
        return sum((o ** 2).sum() for o in link(x, [q, q * 0.5]))

    def f_q(x):
        return sum((o ** 2).sum() for o in link(bev, [x, x * 0.5]))

    assert numerics.finite_diff_check(f_bev, bev) < 1e-5
    assert numerics.finite_diff_check(f_q, q) < 1e-5


def test_separated_generator_shapes():
    torch.manual_seed(0)
    gen = SeparatedGenerator(16, 4, 3)
    out = gen(torch.randn(2, 64, 16), torch.randn(2, 3, 3))
    assert len(out) == 3 and all(o.shape == (2, 64, 16) for o in out)

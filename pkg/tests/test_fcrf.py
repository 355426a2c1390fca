from dataclasses import replace

import numpy as np
import pytest

from audit.fcrf import (
    DepNode,
    DependencyMatrix,
    block_layers,
    check_fcrf,
    dependency_matrix,
    network_layers,
    propagate,
)
from core.arch import antnet_cifar, antnet_imagenet, e_antnet, mobilenet_v2_baseline, plan_layers
from core.blocks import ant_block_forward, init_ant_block
from core.errors import AnalysisError
from core.tensor import Tensor, no_grad
from models import BlockConfig


def _dws_g2(placement='none'):
    return BlockConfig(8, 8, 1, groups=2, reduction=4, placement=placement, expand_t1=False)


# ─── Matrices ──────────────────────────────────────────────

class TestDependencyMatrix:
    def test_contiguous_groups_are_block_diagonal(self):
        bits = DependencyMatrix.grouped(4, 8, 2).bits
        assert bits[:2, :4].all() and bits[2:, 4:].all()
        assert not bits[:2, 4:].any() and not bits[2:, :4].any()

    def test_interleaved_groups(self):
        interleaved = DependencyMatrix.grouped(4, 8, 2, 'interleaved').bits
        assert all(row.sum() == 4 for row in interleaved)
        # 1-based channel 1 reads input channels 5..8
        assert interleaved[0, 4:].all() and not interleaved[0, :4].any()
        contiguous = DependencyMatrix.grouped(4, 8, 2).bits
        assert sorted(map(tuple, interleaved)) == sorted(map(tuple, contiguous))

    def test_single_group_is_full(self):
        assert DependencyMatrix.grouped(3, 5, 1).is_full

    def test_identity_composition(self):
        eye = DependencyMatrix.identity(4)
        assert eye.compose(eye) == eye
        assert not eye.is_full and eye.witness() == (0, 1)

    def test_full_absorbs(self):
        grouped = DependencyMatrix.grouped(8, 8, 4)
        assert DependencyMatrix.full(8, 8).compose(grouped).is_full
        assert grouped.compose(DependencyMatrix.full(8, 3)).is_full

    def test_union(self):
        merged = DependencyMatrix.grouped(8, 8, 2).union(DependencyMatrix.identity(8))
        assert merged == DependencyMatrix.grouped(8, 8, 2)

    def test_chain_mismatch(self):
        with pytest.raises(AnalysisError):
            DependencyMatrix.identity(4).compose(DependencyMatrix.identity(3))

    def test_grid(self):
        assert DependencyMatrix.grouped(2, 2, 2).to_grid() == '10\n01\n'

    def test_bad_groups(self):
        with pytest.raises(AnalysisError):
            DependencyMatrix.grouped(6, 8, 3)


class TestPropagate:
    def test_unknown_kind(self):
        with pytest.raises(AnalysisError):
            propagate([DepNode('x', 'shuffle', 4, 4)])

    def test_empty(self):
        with pytest.raises(AnalysisError):
            propagate([])

    def test_channel_mismatch(self):
        with pytest.raises(AnalysisError):
            propagate([DepNode('a', 'conv', 4, 8), DepNode('b', 'conv', 6, 6)])

    def test_depthwise_then_pointwise(self):
        nodes = [DepNode('dw', 'depthwise', 4, 4, 4), DepNode('pw', 'conv', 4, 6)]
        assert propagate(nodes).is_full


# ─── Blocks and networks ───────────────────────────────────

class TestVerdicts:
    @pytest.mark.parametrize('groups', [1, 2])
    def test_antblock_is_full(self, groups):
        verdict = check_fcrf(BlockConfig(8, 8, 6, groups=groups, reduction=8))
        assert verdict.fcrf and verdict.witness is None and verdict.matrix_density == 1.0

    def test_grouped_block_without_attention_is_not(self):
        verdict = check_fcrf([_dws_g2(), _dws_g2()])
        assert not verdict.fcrf
        assert verdict.witness == (0, 4)
        assert verdict.matrix_density == 0.5

    def test_interleaved_layout(self):
        verdict = check_fcrf(_dws_g2(), layout='interleaved')
        assert not verdict.fcrf

    def test_dense_expansion_restores_full(self):
        assert check_fcrf(replace(_dws_g2(), expand_t1=True)).fcrf

    def test_attention_restores_full(self):
        assert check_fcrf([_dws_g2('between'), _dws_g2()]).fcrf

    def test_attention_after_projection(self):
        assert check_fcrf(_dws_g2('after_projection')).fcrf

    def test_depthwise_start(self):
        cfg = BlockConfig(8, 8, 2, groups=2, reduction=4)
        assert check_fcrf(cfg, start='depthwise').fcrf
        bare = check_fcrf(replace(cfg, placement='none'), start='depthwise')
        assert not bare.fcrf and bare.shape == (8, 16)

    def test_depthwise_start_leaves_out_skip(self):
        nodes = block_layers(BlockConfig(8, 8, 2), start='depthwise')
        assert all(node.kind != 'residual' for node in nodes)
        assert nodes[0].name == 'block.dwise'

    def test_ensemble_layers(self):
        nodes = block_layers(BlockConfig(8, 8, 2, placement='none'), 'ant', branch_groups=(1, 2))
        assert len(nodes) == 1 and nodes[0].kind == 'residual' and len(nodes[0].branches) == 2
        assert check_fcrf(nodes).fcrf

    @pytest.mark.parametrize('spec', [antnet_imagenet(2), antnet_cifar(2), e_antnet('cifar'),
                                      mobilenet_v2_baseline('cifar')])
    def test_networks_are_full(self, spec):
        verdict = check_fcrf(spec)
        assert verdict.fcrf
        blocks = [plan for plan in plan_layers(spec) if plan.block is not None]
        assert verdict.shape == (blocks[-1].out_shape[0], blocks[0].in_shape[0])

    def test_shipped_depthwise_separable_specs(self, shipped):
        assert not check_fcrf(shipped('dws_noattention_g2')).fcrf
        assert check_fcrf(shipped('dws_attention_g2')).fcrf
        assert check_fcrf(shipped('conv_only')).fcrf

    def test_network_range_skips_stem_and_head(self, shipped):
        names = [node.name for node in network_layers(shipped('dws_noattention_g2'))]
        assert 'conv0' not in names and 'conv8' not in names

    def test_structural_not_numeric(self):
        cfg = BlockConfig(8, 8, 2, groups=2, reduction=4)
        assert dependency_matrix(cfg) == dependency_matrix(replace(cfg, attention_bias=False))


# ─── Soundness against the forward pass ────────────────────

def _random_config(rng):
    g = int(rng.choice([1, 2]))
    c1 = 2 * int(rng.integers(1, 4))
    c2 = 2 * int(rng.integers(1, 4))
    t = int(rng.choice([1, 2]))
    placement = str(rng.choice(['between', 'after_projection', 'none']))
    cfg = BlockConfig(c1, c2, t, 1, g, 1, placement, expand_t1=bool(rng.integers(2)),
                      projection_shortcut=bool(rng.integers(2)))
    return cfg.validate()


class TestSoundness:
    def test_observed_dependencies_are_reported(self, rng):
        for _ in range(12):
            cfg = _random_config(rng)
            params = init_ant_block(cfg, rng)
            x = rng.standard_normal((1, cfg.in_channels, 5, 5))
            with no_grad():
                base = ant_block_forward(Tensor(x), params, cfg, training=False).data
                changed = np.zeros((cfg.out_channels, cfg.in_channels), dtype=bool)
                for i in range(cfg.in_channels):
                    bumped = x.copy()
                    bumped[:, i] += 1.0
                    out = ant_block_forward(Tensor(bumped), params, cfg, training=False).data
                    changed[:, i] = np.abs(out - base).max(axis=(0, 2, 3)) > 1e-12
            matrix = dependency_matrix(cfg).bits
            assert changed.any()
            assert not (changed & ~matrix).any(), cfg

"""
Network Architectures
Generator and shared discriminator/auxiliary networks for the simulated 2D data
(sim_mlp) and for 28x28 MNIST images (mnist_conv)
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from dtlc import TreeSpec
from standardization_utils import ConfigurationError
from tensornet import (Activation, BatchNorm, BlockMean, BlockSoftmax, Conv, ConvUp, Dense, Flatten, Layer,
                       NetworkGraph, Unflatten)

logger = logging.getLogger(__name__)

GENERATOR = 'generator'
DISCRIMINATOR = 'discriminator'
D_HEAD = 'd'
X_HEAD = 'x'

SIM_HIDDEN = 128
MNIST_HIDDEN = 1024
Q_HIDDEN = 128


def head_name(layer: int) -> str:
    return f"q{layer}"


@dataclass
class Models:
    arch: str
    tree: TreeSpec
    dim_z: int
    generator: NetworkGraph
    discriminator: NetworkGraph

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return ARCHITECTURES[self.arch]['sample_shape']

    @property
    def is_image(self) -> bool:
        return len(self.sample_shape) == 3

    def graphs(self) -> List[NetworkGraph]:
        return [self.generator, self.discriminator]


def _q_output(tree: TreeSpec, layer: int) -> Layer:
    nodes, width = tree.node_counts[layer - 1], tree.branching[layer - 1]
    return BlockSoftmax(nodes, width) if tree.is_discrete(layer) else BlockMean(nodes, width)


def _sim_mlp(tree: TreeSpec, dim_z: int, rngs, dtype):
    g_rng, d_rng = rngs
    generator_trunk = [
        Dense(dim_z + tree.leaf_dim, SIM_HIDDEN, g_rng, dtype), Activation('relu'),
        Dense(SIM_HIDDEN, SIM_HIDDEN, g_rng, dtype), Activation('relu'),
    ]
    generator_heads = {X_HEAD: [Dense(SIM_HIDDEN, 2, g_rng, dtype)]}

    trunk = [
        Dense(2, SIM_HIDDEN, d_rng, dtype), Activation('relu'),
        Dense(SIM_HIDDEN, SIM_HIDDEN, d_rng, dtype), Activation('relu'),
    ]
    heads: Dict[str, List[Layer]] = {D_HEAD: [Dense(SIM_HIDDEN, 1, d_rng, dtype), Activation('sigmoid')]}
    for layer in range(1, tree.depth + 1):
        heads[head_name(layer)] = [
            Dense(SIM_HIDDEN, Q_HIDDEN, d_rng, dtype), Activation('relu'),
            Dense(Q_HIDDEN, tree.layer_width(layer), d_rng, dtype), _q_output(tree, layer),
        ]
    return generator_trunk, generator_heads, trunk, heads


def _mnist_conv(tree: TreeSpec, dim_z: int, rngs, dtype):
    g_rng, d_rng = rngs
    generator_trunk = [
        Dense(dim_z + tree.leaf_dim, MNIST_HIDDEN, g_rng, dtype), BatchNorm(MNIST_HIDDEN, dtype), Activation('relu'),
        Dense(MNIST_HIDDEN, 7 * 7 * 128, g_rng, dtype), BatchNorm(7 * 7 * 128, dtype), Activation('relu'),
        Unflatten(128, 7, 7),
        ConvUp(128, 64, 4, 2, g_rng, dtype), BatchNorm(64, dtype), Activation('relu'),
    ]
    generator_heads = {X_HEAD: [ConvUp(64, 1, 4, 2, g_rng, dtype), Activation('sigmoid')]}

    trunk = [
        Conv(1, 64, 4, 2, d_rng, dtype), Activation('lrelu'),
        Conv(64, 128, 4, 2, d_rng, dtype), BatchNorm(128, dtype), Activation('lrelu'),
        Flatten(),
        Dense(7 * 7 * 128, MNIST_HIDDEN, d_rng, dtype), BatchNorm(MNIST_HIDDEN, dtype), Activation('lrelu'),
    ]
    heads: Dict[str, List[Layer]] = {D_HEAD: [Dense(MNIST_HIDDEN, 1, d_rng, dtype), Activation('sigmoid')]}
    for layer in range(1, tree.depth + 1):
        heads[head_name(layer)] = [
            Dense(MNIST_HIDDEN, Q_HIDDEN, d_rng, dtype), BatchNorm(Q_HIDDEN, dtype), Activation('lrelu'),
            Dense(Q_HIDDEN, tree.layer_width(layer), d_rng, dtype), _q_output(tree, layer),
        ]
    return generator_trunk, generator_heads, trunk, heads


ARCHITECTURES = {
    'sim_mlp': {'builder': _sim_mlp, 'sample_shape': (2,)},
    'mnist_conv': {'builder': _mnist_conv, 'sample_shape': (1, 28, 28)},
}


def build_models(arch: str, tree: TreeSpec, dim_z: int, dtype=np.float32, seed: int = 0) -> Models:
    """Freshly initialized generator and discriminator/auxiliary graphs"""
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"Unknown architecture '{arch}'",
                                 {'net.arch': arch, 'choices': sorted(ARCHITECTURES)})
    g_seq, d_seq, g_dropout, d_dropout = np.random.SeedSequence(seed).spawn(4)
    rngs = (np.random.default_rng(g_seq), np.random.default_rng(d_seq))
    g_trunk, g_heads, d_trunk, d_heads = ARCHITECTURES[arch]['builder'](tree, dim_z, rngs, dtype)
    generator = NetworkGraph(GENERATOR, g_trunk, g_heads, seed=g_dropout, dtype=dtype)
    discriminator = NetworkGraph(DISCRIMINATOR, d_trunk, d_heads, seed=d_dropout, dtype=dtype)
    logger.debug(f"built {arch}: {len(generator.parameters())} generator and "
                 f"{len(discriminator.parameters())} discriminator parameter tensors")
    return Models(arch, tree, dim_z, generator, discriminator)

"""Stock layer stacks."""

from .network import Architecture, LayerSpec, NetworkState


def alexnet_like_layers(n_outputs, dropout=0.2):
    """Three valid 3x3 convs, two pools, two 2048-unit dense layers."""
    layers = [
        LayerSpec.conv(64, 3),
        LayerSpec.conv(128, 3),
        LayerSpec.maxpool(2),
    ]
    if dropout:
        layers.append(LayerSpec.dropout(dropout))
    layers += [LayerSpec.conv(256, 3), LayerSpec.maxpool(2), LayerSpec.flatten(), LayerSpec.dense(2048)]
    if dropout:
        layers.append(LayerSpec.dropout(dropout))
    layers += [LayerSpec.dense(2048), LayerSpec.dense(n_outputs, activation="identity")]
    return layers


def alexnet_like(n_outputs, input_shape=(3, 32, 32), dropout=0.2, allocate=True):
    cls = NetworkState if allocate else Architecture
    return cls(input_shape, alexnet_like_layers(n_outputs, dropout))


def mlp_layers(hidden, n_outputs, dropout=0.0):
    layers = []
    for h in hidden:
        layers.append(LayerSpec.dense(h))
        if dropout:
            layers.append(LayerSpec.dropout(dropout))
    layers.append(LayerSpec.dense(n_outputs, activation="identity"))
    return layers


def mlp(input_dim, hidden, n_outputs, dropout=0.0, allocate=True):
    cls = NetworkState if allocate else Architecture
    return cls((input_dim,), mlp_layers(hidden, n_outputs, dropout))

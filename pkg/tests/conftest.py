import pytest

TINY_CONFIG = """
[model]
task = classification
precision = float32

[backbone]
embed_dim = 8
stages = 16x8x4, 8x16x4
pre_blocks = 0
post_blocks = 1
single_queries = 4
d_model = 8
d_global = 16
heads = 2

[head]
hidden = 8
dropout = 0.0

[train]
epochs = 2
batch_size = 4
seed = 0

[data]
classes = sphere, box
samples_per_class = 3
test_per_class = 2
n_points = 32
seed = 0
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_CONFIG)
    return p

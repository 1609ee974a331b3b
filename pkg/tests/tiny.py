"""A config small enough to train a cell in well under a second."""

TINY = """\
data.train = 12
data.val = 4
data.grid = 4
data.feat_dim = 8
data.max_objects = 3
model.queries = 4
model.width = 8
model.pe_width = 8
optim.steps = 6
eval.diag_scenes = 4
"""

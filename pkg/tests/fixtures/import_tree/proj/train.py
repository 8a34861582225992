import os
import sys
from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from . import tree
from .sub import helpers


def run():
    return np.zeros(3), torch.zeros(3), nn.Identity(), OrderedDict(), os.sep, sys.argv, tree, helpers

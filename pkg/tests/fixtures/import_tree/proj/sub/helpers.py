import scipy.linalg
from torchvision import transforms

import tree

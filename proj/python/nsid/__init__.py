# SPDX-License-Identifier: Apache-2.0
"""Conservative Jacobians and nonsmooth implicit differentiation."""

from ._nsid import *  # noqa: F401,F403
from ._nsid import __doc__  # noqa: F401

__version__ = "0.1.0"

# SPDX-License-Identifier: Apache-2.0
"""Synthetic multi-camera BEV detection with dense contrastive training."""

try:
    from bevcon._bevcon import *  # noqa: F401,F403  (installed wheel layout)
    from bevcon._bevcon import __version__  # noqa: F401
except ImportError:  # in-tree build: extension sits on PYTHONPATH
    from _bevcon import *  # noqa: F401,F403
    from _bevcon import __version__  # noqa: F401

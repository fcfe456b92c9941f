# -*- coding: utf-8 -*-
# file: __init__.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.

__version__ = "1.0.0"

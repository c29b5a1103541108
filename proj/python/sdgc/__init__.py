from ._sdgc import *  # noqa: F401,F403

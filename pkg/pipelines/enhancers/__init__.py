"""Speech enhancers that split a mixture into speech and noise estimates.

Checkpoints and configuration files name an enhancer class as
"enhancer.<ClassName>", so the `enhancer` module is also registered under that
short name.
"""

import sys

from enhancers import enhancer

sys.modules.setdefault("enhancer", enhancer)

"""dexforge: part-aware dexterous grasp synthesis, validation and captioning.

The package is organised as a plain numpy/scipy library:

- :mod:`dexforge.mesh` triangle meshes, signed distance, surface sampling
- :mod:`dexforge.obb` oriented bounding boxes via direction search
- :mod:`dexforge.hand` kinematic hand model with sphere collision proxies
- :mod:`dexforge.partinit` part classification and pose initialisation
- :mod:`dexforge.energy` grasp energies and their analytic gradient
- :mod:`dexforge.optimize` gradient descent over hand pose
- :mod:`dexforge.validate` physical checks, metrics and captions
- :mod:`dexforge.flow` conditional flow-matching utilities
- :mod:`dexforge.pipeline` batch synthesis and record IO
"""

from dexforge.version import __version__

__all__ = ["__version__"]

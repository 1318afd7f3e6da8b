"""voxelmatch: dense voxel-embedding matching and cross-modality rigid alignment.

Library layout:

- :mod:`voxelmatch.geometry`  - points, rigid/affine transforms, point-set fits
- :mod:`voxelmatch.volume`    - volumes, EVF container I/O, resampling, masking
- :mod:`voxelmatch.matching`  - similarity maps, NN and fixed-point matching
- :mod:`voxelmatch.losses`    - contrastive objectives with analytic gradients
- :mod:`voxelmatch.augment`   - intensity/geometric augmentation, patch pairs
- :mod:`voxelmatch.model`     - descriptor bank, projection heads, training
- :mod:`voxelmatch.alignment` - grid-match + rigid-fit + crop loop
- :mod:`voxelmatch.phantom`   - procedural ground-truth phantoms
- :mod:`voxelmatch.metrics`   - MED / CPM evaluation
- :mod:`voxelmatch.cli`       - the ``voxelmatch`` command
"""

from . import (  # noqa: F401
    alignment,
    augment,
    config,
    errors,
    geometry,
    losses,
    matching,
    metrics,
    model,
    phantom,
    volume,
)

__version__ = "0.1.0"

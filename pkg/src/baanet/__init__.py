"""Desk-scale RGB-thermal fusion detector with bi-directional attention gates.

The package is organized around a small deterministic autodiff engine
(:mod:`baanet.tensor`); on top of it sit the cross-modality attention gate
(:mod:`baanet.gate`), the illumination weighting network
(:mod:`baanet.illumination`), the cascaded anchor detector
(:mod:`baanet.detector`, :mod:`baanet.model`), the training objective
(:mod:`baanet.losses`), a synthetic paired RGB-thermal scene generator
(:mod:`baanet.synthdata`), and the miss-rate/FPPI evaluation protocol
(:mod:`baanet.evaluator`). The ``baanet`` CLI (:mod:`baanet.cli`) binds them.
"""

__version__ = "0.1.0"

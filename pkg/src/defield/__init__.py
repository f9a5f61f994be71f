"""defield: deformation-field analysis of serial 3-D scans.

Registration of consecutive volumes, Jacobian-determinant maps, tumor
region partitions, the region statistics pipeline, and the ordering-based
response classifier, plus a synthetic phantom generator and a CLI.
"""

__version__ = "0.1.0"

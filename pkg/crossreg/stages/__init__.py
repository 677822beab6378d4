"""
Stages Package

One module per stage of the registration toolkit: geometry primitives,
scan simulation, feature encoding, attention, overlap masks, superpoint
matching, dense matching, pose estimation, the mask loss, the pipeline,
the benchmark harness, file formats and the self-test.
"""

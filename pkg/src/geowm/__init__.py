"""geowm: a geometry-regularized video world model at desk scale.

The package is organized around four stages that the top-level CLI wires
together:

1. ``scenes``    -- synthetic rigid-body scenes rendered by analytic
                    ray casting, with exact depth, object masks, and
                    ground-truth point tracks.
2. ``model``     -- a dual-branch flow-matching transformer: a video
                    branch that generates RGBD rollouts and a geometry
                    branch, used only during training, that predicts
                    oracle geometry features from the video branch's
                    mid-layer activations.
3. ``aids``      -- an adaptive inverse-dynamics pipeline that recovers
                    end-effector waypoint actions from rollouts, with
                    drift/collapse gating and pose fallbacks.
4. ``metrics``   -- appearance, depth, point-cloud, and tracking metrics
                    plus a rollout-level evaluation report.

Supporting modules: ``geometry`` (pinhole + SO(3)/SE(3) math), ``flow``
(flow-matching path and sampler), ``tape`` (reverse-mode autodiff over a
small numpy operator set), ``teacher`` (oracle geometry features),
``tracking`` (block-matching point tracker), ``tensorio`` (raw tensor
files), ``config`` (run configuration), ``cli`` (command-line entry).
"""

__version__ = "0.1.0"

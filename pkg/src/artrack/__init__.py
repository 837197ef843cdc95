"""Articulated blended-ellipsoid surface registration to 3-D points and normals."""

from .ellipsoid import (Correspondence, Datum, DegenerateNormal, Ellipsoid,
                        SingularCovariance, algebraic_distance, correspond,
                        datum_distance)
from .em import (FrameResult, MixtureParams, NonFiniteObjective, TrackerConfig,
                 e_step, fit_frame, m_step_mixture, m_step_pose,
                 neg_log_likelihood, track_sequence)
from .kinematics import (BodyModel, DimensionMismatch, Joint, Part, RigidMotion,
                         apply_motion, default_body_model, forward_kinematics,
                         load_model, pose_jacobian, save_model)
from .surface import BlendParams, contribution, implicit_value, surface_distance
from .synth import (MotionScript, RootFindFailure, SampleConfig,
                    make_running_script, sample_frame)

__version__ = "0.1.0"

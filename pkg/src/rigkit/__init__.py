"""rigkit: desk-scale automatic rigging, skinning, and pose-reset toolkit
for bipedal 3D characters."""

from .deform import (BlendWeights, MotionFrame, RiggedCharacter, animate,
                     blended_affines, lbs_dq, lbs_linear, to_rest)
from .geom import (CanonicalFrame, DualQuat, NormalizationRecord, PoseSet,
                   RigidTransform, apply_pose_to_skeleton, canonicalize,
                   dq_apply_point, dq_from_rigid, dq_mul, dq_normalize,
                   normalize_shape, rigid_from_dq)
from .metrics import EvalReport, bone_matching, cd_b2b, cd_j2b, cd_j2j, \
    percentage_errors
from .model import (BoneEmbeddings, ModelConfig, RigModel, ShapeLatent,
                    extend_model)
from .sampling import (SampledShape, TriangleMesh, fps, hierarchical_fps,
                       hierarchical_sample, read_obj, sample_surface, write_obj)
from .skeleton import (AncestralMask, KinematicTree, Skeleton, anc,
                       ancestral_mask, level_schedule, standard_humanoid)
from .synthdata import (ExtraBoneSpec, SynthCharacter, SynthConfig,
                        attach_extra_bones, default_pose_limits,
                        generate_character, make_training_pair, sample_pose)

__version__ = "0.1.0"

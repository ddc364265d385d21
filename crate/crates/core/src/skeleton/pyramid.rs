use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};

/// Joint → part → body affiliation maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub joint_to_part: Vec<usize>,
    pub part_to_body: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<PyramidNames>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidNames {
    #[serde(default)]
    pub joints: Vec<String>,
    #[serde(default)]
    pub parts: Vec<String>,
    #[serde(default)]
    pub bodies: Vec<String>,
}

fn count_groups(map: &[usize], what: &str) -> Result<usize> {
    let n = map.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    for &g in map {
        seen[g] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(PspError::Pyramid(format!("{what} {missing} has no members")));
    }
    Ok(n)
}

impl PyramidSpec {
    /// Builds and validates a spec. Group counts are inferred as `max + 1`;
    /// every group in `0..count` must be non-empty.
    pub fn new(joint_to_part: Vec<usize>, part_to_body: Vec<usize>) -> Result<Self> {
        let spec = PyramidSpec {
            joint_to_part,
            part_to_body,
            names: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_to_part.is_empty() {
            return Err(PspError::Pyramid("joint_to_part is empty".into()));
        }
        let p = count_groups(&self.joint_to_part, "part")?;
        if self.part_to_body.len() != p {
            return Err(PspError::Pyramid(format!(
                "part_to_body has {} entries but joint_to_part references {p} parts",
                self.part_to_body.len()
            )));
        }
        count_groups(&self.part_to_body, "body")?;
        if let Some(names) = &self.names {
            for (label, list, want) in [
                ("joints", &names.joints, self.n_joints()),
                ("parts", &names.parts, self.n_parts()),
                ("bodies", &names.bodies, self.n_bodies()),
            ] {
                if !list.is_empty() && list.len() != want {
                    return Err(PspError::Pyramid(format!("{} {label} names for {want} nodes", list.len())));
                }
            }
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.joint_to_part.len()
    }

    pub fn n_parts(&self) -> usize {
        self.part_to_body.len()
    }

    pub fn n_bodies(&self) -> usize {
        self.part_to_body.iter().max().map_or(0, |m| m + 1)
    }

    pub fn joint_to_body(&self) -> Vec<usize> {
        self.joint_to_part.iter().map(|&p| self.part_to_body[p]).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PspError::io(path, e))?;
        let spec: PyramidSpec = serde_json::from_str(&text).map_err(|e| PspError::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("pyramid spec serializes");
        std::fs::write(path, text).map_err(|e| PspError::io(path, e))
    }
}

/// Default partition for the 25-joint (Kinect v2) and 20-joint (Kinect v1)
/// layouts: 10 parts, 5 bodies.
///
/// Parts: head+neck, torso, left arm, left hand, right arm, right hand,
/// left leg, left foot, right leg, right foot. Bodies: trunk, left upper,
/// right upper, left lower, right lower.
pub fn default_pyramid(n_joints: usize) -> Result<PyramidSpec> {
    let parts_25: [&[usize]; 10] = [
        &[2, 3],
        &[0, 1, 20],
        &[4, 5],
        &[6, 7, 21, 22],
        &[8, 9],
        &[10, 11, 23, 24],
        &[12, 13],
        &[14, 15],
        &[16, 17],
        &[18, 19],
    ];
    let parts_20: [&[usize]; 10] = [
        &[2, 3],
        &[0, 1],
        &[4, 5],
        &[6, 7],
        &[8, 9],
        &[10, 11],
        &[12, 13],
        &[14, 15],
        &[16, 17],
        &[18, 19],
    ];
    let groups = match n_joints {
        25 => parts_25,
        20 => parts_20,
        n => {
            return Err(PspError::Pyramid(format!(
                "no default pyramid for {n} joints; supply a pyramid spec file"
            )))
        }
    };
    let mut joint_to_part = vec![usize::MAX; n_joints];
    for (p, joints) in groups.iter().enumerate() {
        for &j in *joints {
            joint_to_part[j] = p;
        }
    }
    debug_assert!(joint_to_part.iter().all(|&p| p != usize::MAX));
    let mut spec = PyramidSpec::new(joint_to_part, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4])?;
    spec.names = Some(PyramidNames {
        joints: Vec::new(),
        parts: [
            "head", "torso", "left_arm", "left_hand", "right_arm", "right_hand", "left_leg", "left_foot", "right_leg",
            "right_foot",
        ]
        .map(String::from)
        .to_vec(),
        bodies: ["trunk", "left_upper", "right_upper", "left_lower", "right_lower"]
            .map(String::from)
            .to_vec(),
    });
    Ok(spec)
}

/// Six joints, four parts, two bodies. Used by the gradient check and tests.
pub fn tiny_pyramid() -> PyramidSpec {
    PyramidSpec::new(vec![0, 0, 1, 2, 3, 3], vec![0, 0, 1, 1]).expect("tiny pyramid is valid")
}

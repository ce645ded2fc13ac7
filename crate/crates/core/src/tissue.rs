use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Semantic tissue classes of the probe/forearm scene.
///
/// IDs are fixed 1..=7 and are what gets stored per voxel in label maps and
/// in the PNG mask files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TissueClass {
    Artery = 1,
    Skin = 2,
    MuscleBackground = 3,
    UsGel = 4,
    TransducerMembrane = 5,
    HeavyWater = 6,
    Vein = 7,
}

pub const ALL_CLASSES: [TissueClass; 7] = [
    TissueClass::Artery,
    TissueClass::Skin,
    TissueClass::MuscleBackground,
    TissueClass::UsGel,
    TissueClass::TransducerMembrane,
    TissueClass::HeavyWater,
    TissueClass::Vein,
];

/// Number of tissue classes (= one-hot channel count).
pub const NUM_CLASSES: usize = 7;

impl TissueClass {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self, CoreError> {
        match id {
            1 => Ok(TissueClass::Artery),
            2 => Ok(TissueClass::Skin),
            3 => Ok(TissueClass::MuscleBackground),
            4 => Ok(TissueClass::UsGel),
            5 => Ok(TissueClass::TransducerMembrane),
            6 => Ok(TissueClass::HeavyWater),
            7 => Ok(TissueClass::Vein),
            other => Err(CoreError::InvalidClassId(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Artery => "artery",
            TissueClass::Skin => "skin",
            TissueClass::MuscleBackground => "muscle-background",
            TissueClass::UsGel => "us-gel",
            TissueClass::TransducerMembrane => "transducer-membrane",
            TissueClass::HeavyWater => "heavy-water",
            TissueClass::Vein => "vein",
        }
    }

    /// True for classes that are actual tissue rather than coupling media
    /// or probe hardware.
    pub fn is_tissue(self) -> bool {
        matches!(
            self,
            TissueClass::Artery
                | TissueClass::Skin
                | TissueClass::MuscleBackground
                | TissueClass::Vein
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for class in ALL_CLASSES {
            assert_eq!(TissueClass::from_id(class.id()).unwrap(), class);
        }
    }

    #[test]
    fn ids_are_one_through_seven() {
        let ids: Vec<u8> = ALL_CLASSES.iter().map(|c| c.id()).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(TissueClass::from_id(0).is_err());
        assert!(TissueClass::from_id(8).is_err());
        assert!(TissueClass::from_id(9).is_err());
    }

    #[test]
    fn names_match_listing() {
        assert_eq!(TissueClass::Artery.name(), "artery");
        assert_eq!(TissueClass::HeavyWater.name(), "heavy-water");
        assert_eq!(TissueClass::Vein.name(), "vein");
    }
}

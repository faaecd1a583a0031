use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use xdistill::analysis::{classify_text, grounded_ratio, ratio_from_counts};
use xdistill::tokenize::GroundedClass;

fn class() -> impl Strategy<Value = GroundedClass> {
    prop_oneof![Just(GroundedClass::Grounded), Just(GroundedClass::NonGrounded), Just(GroundedClass::Stopword)]
}

#[test]
fn hand_counts() {
    assert_eq!(ratio_from_counts(3, 1).unwrap(), 0.75);
    assert_eq!(ratio_from_counts(0, 4).unwrap(), 0.0);
    assert!(ratio_from_counts(0, 0).is_err());
}

#[test]
fn threshold_is_strict() {
    let stop: HashSet<String> = ["a".to_string()].into();
    let freq: HashMap<String, u64> = [("dog".to_string(), 101), ("idea".to_string(), 100)].into();
    let classes = classify_text("A dog, an idea", &stop, &freq, 100);
    let g = classes.iter().filter(|c| **c == GroundedClass::Grounded).count();
    assert_eq!(g, 1);
    assert_eq!(classes.iter().filter(|c| **c == GroundedClass::Stopword).count(), 1);
}

proptest! {
    #[test]
    fn order_does_not_matter(mut classes in prop::collection::vec(class(), 1..40), seed in any::<u64>()) {
        let before = grounded_ratio(&classes);
        let n = classes.len();
        for i in (1..n).rev() {
            classes.swap(i, (seed as usize).wrapping_add(i * 2654435761) % (i + 1));
        }
        let after = grounded_ratio(&classes);
        prop_assert_eq!(before.is_ok(), after.is_ok());
        if let (Ok(a), Ok(b)) = (before, after) {
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn stopwords_never_change_the_ratio(classes in prop::collection::vec(class(), 1..40), extra in 0usize..10) {
        let mut padded = classes.clone();
        padded.extend(std::iter::repeat_n(GroundedClass::Stopword, extra));
        prop_assert_eq!(grounded_ratio(&classes).ok(), grounded_ratio(&padded).ok());
    }
}

mod common;

use std::collections::BTreeSet;

use common::{all_categories, icd_props, raw_icd10};
use ecg_icd::icd::{chapter_of, expand_all, expand_ancestors, normalize, select_label_set, Chapter, IcdCode, IcdError, IcdVersion, MappingTable};
use proptest::prelude::*;

fn code(s: &str) -> IcdCode {
    IcdCode::icd10(s).unwrap()
}

fn set(list: &[&str]) -> BTreeSet<IcdCode> {
    list.iter().map(|c| code(c)).collect()
}

use icd_props::norm10;

#[test]
fn worked_examples() {
    assert_eq!(norm10("I48.92").unwrap(), vec![code("I4892")]);
    assert_eq!(expand_ancestors(&code("I4892")), set(&["I48", "I489", "I4892"]));
    // Truncation to five characters happens before placeholder stripping.
    assert_eq!(norm10("T36.0X1A").unwrap(), vec![code("T360")]);
    assert_eq!(norm10("T36XX").unwrap(), vec![code("T36")]);
    assert_eq!(norm10("S72.001A").unwrap(), vec![code("S7200")]);
    assert_eq!(norm10("z66").unwrap(), vec![code("Z66")]);
    assert_eq!(expand_ancestors(&code("Z66")), set(&["Z66"]));
    assert_eq!(expand_ancestors(&code("E1129")), set(&["E11", "E112", "E1129"]));
    assert_eq!(chapter_of(&code("I48")).unwrap(), Chapter::IX);
    assert_eq!(chapter_of(&code("A00")).unwrap(), Chapter::I);
    assert_eq!(chapter_of(&code("Z66")).unwrap(), Chapter::XXI);
    assert_eq!(chapter_of(&code("O9A")).unwrap(), Chapter::XV);
    assert_eq!(chapter_of(&code("D49")).unwrap(), Chapter::II);
    assert_eq!(chapter_of(&code("D50")).unwrap(), Chapter::III);
    assert_eq!(chapter_of(&code("H59")).unwrap(), Chapter::VII);
    assert_eq!(chapter_of(&code("H60")).unwrap(), Chapter::VIII);
    assert_eq!(chapter_of(&code("U07")).unwrap(), Chapter::XXII);
}

#[test]
fn malformed_and_unmappable_codes() {
    for bad in ["", "  ", "48.92", "I4", "IXX", "I4#9"] {
        assert!(matches!(norm10(bad), Err(IcdError::MalformedCode(_))), "{bad:?}");
    }
    let table = MappingTable::from_pairs([("42731", "I480"), ("42731", "I4891"), ("4280", "I509")]).unwrap();
    assert_eq!(normalize("427.31", IcdVersion::Icd9, &table).unwrap(), vec![code("I480"), code("I4891")]);
    assert!(matches!(normalize("99999", IcdVersion::Icd9, &table), Err(IcdError::UnmappableIcd9(_))));
    assert!(matches!(normalize("I4891", IcdVersion::Icd9, &table), Err(IcdError::MalformedCode(_))));
}

#[test]
fn chapters_partition_every_category() {
    assert_eq!(all_categories().len(), 26 * 10 * 36);
    assert_eq!(icd_props::chapter_partition().unwrap(), Chapter::ALL.len());
}

#[test]
fn label_set_threshold_counts_expanded_pairs() {
    // Two records, one per line, after expansion.
    let records = [expand_all(&set(&["I4891", "I10"])), expand_all(&set(&["I4892"]))];
    let stream: Vec<&IcdCode> = records.iter().flatten().collect();
    let ls = select_label_set(stream.clone(), 2).unwrap();
    let got: Vec<&str> = ls.codes().iter().map(|c| c.as_str()).collect();
    assert_eq!(got, ["I48", "I489"]);
    assert!(matches!(select_label_set(stream, 3), Err(IcdError::EmptyLabelSet(3))));
}

proptest! {
    #[test]
    fn normalization_is_idempotent_and_matches_rule(raw in raw_icd10()) {
        icd_props::normalization(&raw)?;
    }

    #[test]
    fn ancestor_closure(raws in proptest::collection::vec(raw_icd10(), 1..12)) {
        icd_props::ancestor_closure(&raws)?;
    }

    #[test]
    fn label_set_ignores_annotation_order(
        raws in proptest::collection::vec(raw_icd10(), 1..40),
        threshold in 1usize..4,
        seed in any::<u64>(),
    ) {
        icd_props::label_set_order(&raws, threshold, seed)?;
    }
}

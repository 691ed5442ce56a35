//! Built-in scenario presets, one per deployed system configuration.

pub const PRESETS: &[(&str, &str)] = &[
    ("hd_timebin", include_str!("../presets/hd_timebin.json")),
    ("cv_fading_810", include_str!("../presets/cv_fading_810.json")),
    ("cv_fiber_1550", include_str!("../presets/cv_fiber_1550.json")),
    ("bbm92_fiber", include_str!("../presets/bbm92_fiber.json")),
    ("fwf_bb84", include_str!("../presets/fwf_bb84.json")),
    ("trusted_node", include_str!("../presets/trusted_node.json")),
    ("combined_pqc", include_str!("../presets/combined_pqc.json")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(preset_name, _)| *preset_name == name)
        .map(|(_, json)| *json)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(name, _)| *name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_scenario;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, json) in PRESETS {
            let scenario = parse_scenario(json.as_bytes())
                .unwrap_or_else(|e| panic!("preset {name}: {e}"));
            assert_eq!(&scenario.name, name);
        }
    }

    #[test]
    fn lookup() {
        assert!(preset("fwf_bb84").is_some());
        assert!(preset("nope").is_none());
        assert_eq!(names().len(), PRESETS.len());
    }

    #[test]
    fn published_schema_file_matches_protocol_tags() {
        let schema: serde_json::Value =
            serde_json::from_str(include_str!("../../../docs/scenario.schema.json"))
                .expect("schema file is valid JSON");
        let rendered = schema.to_string();
        for tag in ["bb84_1decoy", "bbm92", "hd_timebin", "cv_gaussian", "cv_fading"] {
            assert!(rendered.contains(tag), "schema missing protocol {tag}");
        }
        // every preset uses a protocol the schema declares
        for (name, json) in PRESETS {
            let value: serde_json::Value = serde_json::from_str(json).unwrap();
            for link in value["links"].as_array().unwrap() {
                let tag = link["protocol"]["type"].as_str().unwrap();
                assert!(rendered.contains(tag), "{name}: protocol {tag} not in schema");
            }
        }
    }
}

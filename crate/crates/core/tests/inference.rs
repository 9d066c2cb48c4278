// Kept alone in its own binary: the mask counter is process-wide.

use slotforge::features::generate_scene;
use slotforge::masking::mask_applications;
use slotforge::{infer, InferOptions, MaskSource, Model, RunConfig, SyntheticSceneSpec};

#[test]
fn inference_never_masks() {
    let cfg = RunConfig::desk();
    let model = Model::new(cfg.model, 3).unwrap();
    let (map, _) = generate_scene(&SyntheticSceneSpec::default()).unwrap();
    let before = mask_applications();
    for source in [MaskSource::Alpha, MaskSource::Attention] {
        let opts = InferOptions {
            mask_source: source,
            ..Default::default()
        };
        infer(&model, &map, &opts).unwrap();
    }
    assert_eq!(mask_applications(), before);
}

use gsnet::data::{load_dataset, synthesize_poses, write_json_atomic};
use gsnet::graph::{human36m_topology, H36mVariant};
use gsnet::net::model::{Mode, ModelConfig};
use gsnet::net::train::{Checkpoint, TrainConfig, Trainer};

fn small_config(num_joints: usize) -> ModelConfig {
    ModelConfig {
        num_joints,
        channels: 8,
        num_blocks: 1,
        refine_hidden: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_restores_bit_identical_predictions() {
    let topo = human36m_topology(H36mVariant::Joints16);
    let ds = synthesize_poses(&topo, 24, 2).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&ds, small_config(16), tc).unwrap();
    let data = trainer.data(&ds).unwrap();
    trainer.run(&data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    trainer.checkpoint().save(&path).unwrap();
    let model = Checkpoint::load(&path).unwrap().model().unwrap();
    assert_eq!(
        model.forward(&data.inputs, Mode::Eval).unwrap(),
        trainer.model().forward(&data.inputs, Mode::Eval).unwrap()
    );
}

#[test]
fn atomic_write_replaces_and_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    let topo = human36m_topology(H36mVariant::Joints17);
    let a = synthesize_poses(&topo, 3, 1).unwrap();
    let b = synthesize_poses(&topo, 5, 2).unwrap();
    a.save(&path).unwrap();
    b.save(&path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), b);
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("ds.json")]);
}

#[test]
fn write_to_missing_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent").join("x.json");
    let err = write_json_atomic(&path, &[1, 2, 3]).unwrap_err();
    assert!(err.to_string().contains("absent"), "{err}");
}

#[test]
fn rejects_record_with_wrong_joint_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    let topo = human36m_topology(H36mVariant::Joints16);
    let mut ds = synthesize_poses(&topo, 4, 1).unwrap();
    ds.records[2].pose3d.pop();
    write_json_atomic(&path, &ds).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("record 2"), "{err}");
}

use multiresnet::data::{
    encode_records, load_cifar10, read_records, synth_dataset, write_records, Dataset, Split, SynthSpec,
    CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nearest_template_accuracy(spec: &SynthSpec, data: &Dataset) -> f64 {
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.template(c)).collect();
    let correct = (0..data.len())
        .filter(|&i| {
            let img = data.image(i);
            let dist = |t: &Vec<f64>| -> f64 { img.pixels.data().iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = (0..templates.len())
                .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
                .unwrap();
            best == img.label
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn noiseless_two_class_set_is_template_separable() {
    let spec = SynthSpec::new(400, 2, 8).with_noise(0.0);
    let data = spec.generate(3).unwrap();
    assert_eq!(nearest_template_accuracy(&spec, &data), 1.0);
}

#[test]
fn heavy_noise_sits_between_chance_and_perfect() {
    let spec = SynthSpec::new(2000, 10, 8).with_noise(0.5);
    let data = spec.generate(4).unwrap();
    let acc = nearest_template_accuracy(&spec, &data);
    assert!(acc > 0.1 && acc < 1.0, "accuracy {acc}");
}

#[test]
fn synthetic_export_round_trips_through_record_format() {
    let data = synth_dataset(9, 50, 3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.bin");
    write_records(&path, &data).unwrap();
    let back = read_records(&path, [3, 8, 8], 3, Split::Train).unwrap();
    assert_eq!(back, data);
    assert_eq!(std::fs::read(&path).unwrap(), encode_records(&data));
}

fn random_cifar_file(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut bytes = vec![0u8; CIFAR_RECORDS_PER_FILE * CIFAR_RECORD_BYTES];
    rng.fill(bytes.as_mut_slice());
    for rec in bytes.chunks_exact_mut(CIFAR_RECORD_BYTES) {
        rec[0] %= 10;
    }
    bytes
}

#[test]
fn five_batch_train_set_loads_fifty_thousand_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut first = Vec::new();
    for i in 1..=5 {
        let bytes = random_cifar_file(&mut rng);
        if i == 1 {
            first = bytes.clone();
        }
        std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), bytes).unwrap();
    }
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 50_000);
    assert_eq!(train.shape(), [3, 32, 32]);
    let head = train.subset(&(0..CIFAR_RECORDS_PER_FILE).collect::<Vec<_>>());
    assert_eq!(encode_records(&head), first);
    assert!(load_cifar10(dir.path(), Split::Test).is_err());
}

#[test]
fn short_file_is_rejected_by_loader() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 3 * CIFAR_RECORD_BYTES];
    bytes[CIFAR_RECORD_BYTES] = 2;
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    let err = load_cifar10(dir.path(), Split::Test).unwrap_err().to_string();
    assert!(err.contains("3 records"), "{err}");
}

pub mod curriculum;
pub mod datastore;
pub mod encoder;
pub mod evalkit;
pub mod numkit;
pub mod objective;
pub mod pooling;
pub mod scalar;
pub mod seeding;
pub mod synth;
pub mod trainer;
pub mod triplet;

/// Double-precision instantiations of the generic numeric types.
pub type Tensor = numkit::Tensor<f64>;
pub type Tape = numkit::Tape<f64>;
pub type Encoder = encoder::Encoder<f64>;
pub type EncoderOutput = encoder::EncoderOutput<f64>;
pub type AnchorWeights = pooling::AnchorWeights<f64>;
pub type SentenceEmbedding = pooling::SentenceEmbedding<f64>;
pub type ContrastiveBatch = objective::ContrastiveBatch<f64>;
pub type AdamState = trainer::AdamState<f64>;
pub type TrainRun = trainer::TrainRun<f64>;
pub type Embedder<'a> = evalkit::Embedder<'a, f64>;

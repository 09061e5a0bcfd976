# adaptlab — speaker adaptation lab: LIN, LHUC and KLD-regularised retraining on a numpy DNN
